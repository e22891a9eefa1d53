"""Gaussian-likelihood pixel predictors: ridge linear model and a one-hidden-layer MLP.

Parameter vector layout (``theta``):

* linear: ``[w_1, ..., w_D, b]``
* mlp:    ``[W1 (H x D, row-major), b1 (H), w2 (H), b2]``

Training minimizes ``0.5 * sum(r**2) + lam * ||weights||**2``, the negative
log-likelihood at unit residual scale plus an L2 penalty that leaves the
intercept and all biases unpenalized.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .image import PixelDataset

__all__ = [
    "ModelFamily",
    "FittedModel",
    "TrainOptions",
    "DEFAULT_LAMBDA_GRID",
    "predict",
    "gradient_theta",
    "train",
    "cross_validate_lambda",
    "model_to_json",
    "model_from_json",
]

DEFAULT_LAMBDA_GRID = (0.0, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0)
MODEL_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelFamily:
    kind: str = "linear"
    hidden_nodes: int = 10
    activation: str = "tanh"

    def __post_init__(self):
        if self.kind not in ("linear", "mlp"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.kind == "mlp":
            if int(self.hidden_nodes) < 1:
                raise ValueError("hidden_nodes must be >= 1")
            if self.activation not in ("tanh", "logistic"):
                raise ValueError(f"unknown activation {self.activation!r}")

    def n_params(self, input_dim: int) -> int:
        if self.kind == "linear":
            return input_dim + 1
        H = self.hidden_nodes
        return (input_dim + 1) * H + H + 1

    def penalty_mask(self, input_dim: int) -> np.ndarray:
        """1.0 where the L2 penalty applies, 0.0 for intercepts and biases."""
        mask = np.ones(self.n_params(input_dim))
        if self.kind == "linear":
            mask[-1] = 0.0
        else:
            H = self.hidden_nodes
            mask[H * input_dim:H * input_dim + H] = 0.0
            mask[-1] = 0.0
        return mask

    def to_dict(self) -> dict:
        if self.kind == "linear":
            return {"kind": "linear"}
        return {"kind": "mlp", "hidden_nodes": int(self.hidden_nodes), "activation": self.activation}


@dataclass(frozen=True)
class TrainOptions:
    epochs: int = 100
    batch_size: int = 64
    step_size: float = 1e-2
    decay: float = 0.5
    decay_every: int = 20
    grad_tol: float = 1e-5
    seed: int = 0
    polish: bool = False
    polish_maxiter: int = 500


@dataclass(frozen=True)
class FittedModel:
    family: ModelFamily
    theta: np.ndarray
    sigma_hat: float
    lam: float
    input_dim: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        th = np.array(self.theta, dtype=np.float64)
        if th.shape != (self.family.n_params(self.input_dim),):
            raise ValueError("theta length does not match family and input_dim")
        th.setflags(write=False)
        object.__setattr__(self, "theta", th)
        if not self.sigma_hat > 0:
            raise ValueError("sigma_hat must be positive")

    @property
    def n_params(self) -> int:
        return self.theta.shape[0]


def _act(kind, a):
    if kind == "tanh":
        h = np.tanh(a)
        return h, 1.0 - h * h
    h = 1.0 / (1.0 + np.exp(-a))
    return h, h * (1.0 - h)


def _unpack(theta, D, H):
    W1 = theta[:H * D].reshape(H, D)
    b1 = theta[H * D:H * D + H]
    w2 = theta[H * D + H:H * D + 2 * H]
    return W1, b1, w2, theta[-1]


def _as_batch(m_dim, x):
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    X2 = X[None, :] if single else X
    if X2.ndim != 2 or X2.shape[1] != m_dim:
        raise ValueError(f"dimension mismatch: expected {m_dim} inputs, got {X.shape[-1]}")
    return X2, single


def _forward(family, theta, X):
    D = X.shape[1]
    if family.kind == "linear":
        return X @ theta[:-1] + theta[-1], None
    W1, b1, w2, b2 = _unpack(theta, D, family.hidden_nodes)
    h, dh = _act(family.activation, X @ W1.T + b1)
    return h @ w2 + b2, (h, dh, w2)


def predict(m: FittedModel, x):
    """Predicted conditional mean for one input vector or a (n, D) batch."""
    X, single = _as_batch(m.input_dim, x)
    g, _ = _forward(m.family, m.theta, X)
    return float(g[0]) if single else g


def gradient_theta(m: FittedModel, x):
    """d predict / d theta, in theta order; shape (p,) or (n, p)."""
    X, single = _as_batch(m.input_dim, x)
    G = _jacobian(m.family, m.theta, X)
    return G[0] if single else G


def _jacobian(family, theta, X):
    n, D = X.shape
    if family.kind == "linear":
        return np.hstack([X, np.ones((n, 1))])
    _, (h, dh, w2) = _forward(family, theta, X)
    back = dh * w2  # (n, H)
    H = family.hidden_nodes
    G = np.empty((n, family.n_params(D)))
    G[:, :H * D] = (back[:, :, None] * X[:, None, :]).reshape(n, H * D)
    G[:, H * D:H * D + H] = back
    G[:, H * D + H:H * D + 2 * H] = h
    G[:, -1] = 1.0
    return G


def _loss_grad(family, theta, X, y, lam, mask, total):
    """Mean-scaled objective and its gradient over a batch drawn from ``total`` records."""
    n, D = X.shape
    g, cache = _forward(family, theta, X)
    r = y - g
    pen = lam / total
    loss = 0.5 * np.mean(r * r) + pen * np.sum(mask * theta * theta)
    if family.kind == "linear":
        grad = -np.concatenate([r @ X, [r.sum()]]) / n
    else:
        h, dh, w2 = cache
        H = family.hidden_nodes
        back = (r[:, None] * dh) * w2
        grad = np.empty_like(theta)
        grad[:H * D] = (back.T @ X).ravel()
        grad[H * D:H * D + H] = back.sum(axis=0)
        grad[H * D + H:H * D + 2 * H] = r @ h
        grad[-1] = r.sum()
        grad = -grad / n
    return loss, grad + 2.0 * pen * mask * theta


def train(d: PixelDataset, family: ModelFamily, lam: float = 0.01,
          opts: TrainOptions | None = None) -> FittedModel:
    """Fit theta (penalized MLE), then freeze sigma_hat = sqrt(mean squared residual)."""
    opts = opts or TrainOptions()
    if len(d) == 0:
        raise ValueError("empty training dataset")
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    X, y = d.X, d.y
    D = X.shape[1]
    mask = family.penalty_mask(D)
    meta = {"seed": int(opts.seed), "n_train": int(len(d)), "window": d.spec.to_dict()}
    if family.kind == "linear":
        theta = _ridge(X, y, lam, mask)
        meta["epochs"] = 0
    else:
        theta, info = _sgd(family, X, y, lam, mask, opts)
        meta.update(info)
    r = y - _forward(family, theta, X)[0]
    mse = float(np.mean(r * r))
    meta["final_loss"] = float(_loss_grad(family, theta, X, y, lam, mask, len(d))[0])
    sigma = float(np.sqrt(mse)) if mse > 0 else float(np.finfo(float).tiny)
    return FittedModel(family, theta, sigma, float(lam), D, meta)


def _ridge(X, y, lam, mask):
    n, D = X.shape
    A = np.hstack([X, np.ones((n, 1))])
    b = y
    if lam > 0:
        pen = np.diag(np.sqrt(2.0 * lam) * mask)[mask > 0]
        A = np.vstack([A, pen])
        b = np.concatenate([y, np.zeros(pen.shape[0])])
    theta, _, rank, _ = np.linalg.lstsq(A, b, rcond=None)
    if rank < D + 1:
        raise ValueError("singular normal equations (rank-deficient design with lambda=0)")
    return theta


def _sgd(family, X, y, lam, mask, opts):
    n, D = X.shape
    H = family.hidden_nodes
    rng = np.random.default_rng(opts.seed)
    theta = np.zeros(family.n_params(D))
    theta[:H * D] = rng.uniform(-1, 1, H * D) / np.sqrt(D)
    theta[H * D + H:H * D + 2 * H] = rng.uniform(-1, 1, H) / np.sqrt(H)
    step = opts.step_size
    epoch = 0
    gnorm = np.inf
    for epoch in range(1, opts.epochs + 1):
        order = rng.permutation(n)
        for s in range(0, n, opts.batch_size):
            idx = order[s:s + opts.batch_size]
            _, g = _loss_grad(family, theta, X[idx], y[idx], lam, mask, n)
            theta -= step * g
        loss, g = _loss_grad(family, theta, X, y, lam, mask, n)
        if not np.isfinite(loss):
            raise FloatingPointError("non-finite loss: SGD diverged")
        gnorm = float(np.linalg.norm(g))
        if gnorm < opts.grad_tol:
            break
        if epoch % opts.decay_every == 0:
            step *= opts.decay
    info = {"epochs": epoch, "sgd_grad_norm": gnorm}
    if opts.polish and gnorm >= opts.grad_tol:
        res = optimize.minimize(
            lambda t: _loss_grad(family, t, X, y, lam, mask, n), theta, jac=True,
            method="L-BFGS-B",
            options={"maxiter": opts.polish_maxiter, "gtol": opts.grad_tol * 1e-2, "ftol": 0.0},
        )
        theta = res.x
        info["polish_iterations"] = int(res.nit)
        info["grad_norm"] = float(np.linalg.norm(res.jac))
    else:
        info["grad_norm"] = gnorm
    return theta, info


def cross_validate_lambda(d: PixelDataset, family: ModelFamily, grid=DEFAULT_LAMBDA_GRID,
                          folds: int = 5, opts: TrainOptions | None = None,
                          return_table: bool = False):
    """Pick the grid value with the lowest mean held-out MSE over contiguous folds.

    Folds are contiguous runs of records (horizontal bands of each image), so
    overlapping neighborhoods rarely straddle train and held-out sets.
    Ties go to the larger lambda.
    """
    grid = [float(g) for g in grid]
    if not grid:
        raise ValueError("empty lambda grid")
    if folds < 2:
        raise ValueError("folds must be >= 2")
    n = len(d)
    if n < folds:
        raise ValueError(f"fewer records ({n}) than folds ({folds})")
    if len(grid) == 1:
        return (grid[0], {grid[0]: None}) if return_table else grid[0]
    edges = np.linspace(0, n, folds + 1).astype(int)
    table = {}
    for lam in sorted(grid):
        errs = []
        for k in range(folds):
            held = np.zeros(n, bool)
            held[edges[k]:edges[k + 1]] = True
            sub = PixelDataset(d.y[~held], d.X[~held], d.rows[~held], d.cols[~held], d.spec)
            m = train(sub, family, lam, opts)
            r = d.y[held] - predict(m, d.X[held])
            errs.append(float(np.mean(r * r)))
        table[lam] = float(np.mean(errs))
    best = None
    for lam in sorted(grid):
        if best is None or table[lam] <= table[best]:
            best = lam
    return (best, table) if return_table else best


def model_to_json(m: FittedModel) -> str:
    doc = {
        "format": "microscore.model",
        "version": MODEL_FORMAT_VERSION,
        "family": m.family.to_dict(),
        "input_dim": int(m.input_dim),
        "theta_order": ("weights then intercept" if m.family.kind == "linear"
                        else "W1 row-major (hidden x input), b1, w2, b2"),
        "theta": [float(v) for v in m.theta],
        "sigma_hat": float(m.sigma_hat),
        "lambda": float(m.lam),
        "seed": int(m.meta.get("seed", 0)),
        "meta": m.meta,
    }
    return json.dumps(doc, indent=1)


def model_from_json(text: str) -> FittedModel:
    doc = json.loads(text)
    if doc.get("format") != "microscore.model":
        raise ValueError("not a microscore model document")
    if doc.get("version") != MODEL_FORMAT_VERSION:
        raise ValueError(f"unsupported model version {doc.get('version')}")
    fam = ModelFamily(**doc["family"])
    return FittedModel(fam, np.array(doc["theta"]), doc["sigma_hat"], doc["lambda"],
                       doc["input_dim"], doc.get("meta", {}))
