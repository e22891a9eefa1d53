"""Score-based nonstationarity monitoring charts and their empirical calibration.

Charts per pixel, all on WMA-smoothed statistics:

* SWMA-theta: Hotelling T^2 of z_theta against the raw training score mean and
  covariance, upper limit only.
* SWMA-sigma: z_sigma against a two-sided band.
* SWMA-M: union of the two, plotted as C_M.
* RWMA: smoothed residuals against a two-sided band (baseline).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .image import Micrograph, NeighborhoodSpec, extract_dataset, standardize
from .model import FittedModel
from .scores import ReferenceStats, ScoreField, compute_scores, training_reference_stats
from .smoothing import WmaKernel, build_kernel, smooth

__all__ = [
    "ChartCalibration",
    "ChartResult",
    "t2_statistic",
    "t2_field",
    "scaled_statistics",
    "chart_statistics",
    "calibrate",
    "monitor",
    "monitor_images",
    "score_images",
    "reference_scores",
    "nearest_rank",
    "calibration_to_json",
    "calibration_from_json",
]

CALIBRATION_FORMAT_VERSION = 1
RIDGE_FACTOR = 1e-8
MAX_SEARCH_ITER = 40


def ridge_epsilon(Sigma) -> float:
    Sigma = np.atleast_2d(Sigma)
    tr = float(np.trace(Sigma))
    return RIDGE_FACTOR * tr / Sigma.shape[0] if tr > 0 else RIDGE_FACTOR


def _cholesky(Sigma, eps):
    A = np.atleast_2d(np.asarray(Sigma, dtype=np.float64))
    A = A + eps * np.eye(A.shape[0])
    try:
        return linalg.cholesky(A, lower=True)
    except linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("covariance not positive definite even after ridge") from exc


def t2_statistic(z, s_bar, Sigma, eps: float | None = None) -> float:
    """(z - s_bar)^T (Sigma + eps I)^{-1} (z - s_bar) via a Cholesky solve.

    ``eps`` defaults to 0 here; calibration uses ``ridge_epsilon``.
    """
    z = np.atleast_1d(np.asarray(z, dtype=np.float64))
    s_bar = np.atleast_1d(np.asarray(s_bar, dtype=np.float64))
    if z.shape != s_bar.shape or np.atleast_2d(Sigma).shape != (z.size, z.size):
        raise ValueError("dimension mismatch")
    L = _cholesky(Sigma, 0.0 if eps is None else eps)
    w = linalg.solve_triangular(L, z - s_bar, lower=True)
    return float(w @ w)


def t2_field(Z, s_bar, chol) -> np.ndarray:
    """Row-wise T^2 for a (n, p) array given the lower Cholesky factor."""
    W = linalg.solve_triangular(chol, (Z - s_bar).T, lower=True, check_finite=False)
    return np.einsum("ij,ij->j", W, W)


def scaled_statistics(t2, z_sigma, ucl_theta, lcl_sigma, ucl_sigma):
    """(C_theta, C_sigma, C_M); each signals outside [-1, 1]."""
    c_theta = 2.0 * np.asarray(t2) / ucl_theta - 1.0
    half = 0.5 * (ucl_sigma - lcl_sigma)
    c_sigma = (np.asarray(z_sigma) - 0.5 * (ucl_sigma + lcl_sigma)) / half
    s = c_theta + c_sigma
    # sign(0) taken as +1 so |C_M| > 1 coincides exactly with a component signal
    c_m = np.where(s >= 0, 1.0, -1.0) * np.maximum(np.abs(c_theta), np.abs(c_sigma))
    return c_theta, c_sigma, c_m


def nearest_rank(sorted_x, q):
    """Nearest-rank empirical quantile of an ascending array, q in [0, 1]."""
    n = sorted_x.shape[0]
    idx = min(max(int(math.ceil(q * n)) - 1, 0), n - 1)
    return float(sorted_x[idx])


@dataclass
class ChartCalibration:
    s_bar_theta: np.ndarray
    sigma_theta: np.ndarray
    ridge_eps: float
    ucl_theta: float
    lcl_sigma: float
    ucl_sigma: float
    rwma_lcl: float
    rwma_ucl: float
    alpha_target: float
    alpha_component: float
    achieved_alpha: float
    kernel: dict
    window: dict
    n_cl: int
    search_trace: list = field(default_factory=list)
    _chol: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def chol(self) -> np.ndarray:
        if self._chol is None:
            self._chol = _cholesky(self.sigma_theta, self.ridge_eps)
        return self._chol

    @property
    def wma_kernel(self) -> WmaKernel:
        return build_kernel(self.kernel["l_w"], self.kernel["sigma_w"])


@dataclass
class ChartResult:
    source: str
    top: int
    left: int
    t2_theta: np.ndarray
    z_sigma: np.ndarray
    c_theta: np.ndarray
    c_sigma: np.ndarray
    c_m: np.ndarray
    rwma: np.ndarray
    signals: dict
    power: dict

    @property
    def shape(self):
        return self.t2_theta.shape

    def statistics(self) -> dict:
        return {"T2_theta": self.t2_theta, "z_sigma": self.z_sigma, "C_theta": self.c_theta,
                "C_sigma": self.c_sigma, "C_M": self.c_m, "rwma": self.rwma}


def _smoothed_block(sf: ScoreField, i: int, k: WmaKernel, chol, s_bar, backend=None):
    b, st, ss, rr = sf.grids(i)
    z_theta = smooth(st, k, backend=backend)
    nr, nc, p = z_theta.shape
    t2 = t2_field(z_theta.reshape(nr * nc, p), s_bar, chol).reshape(nr, nc)
    return b, t2, smooth(ss, k, backend=backend), smooth(rr, k, backend=backend)


def chart_statistics(sf: ScoreField, cal: ChartCalibration, k: WmaKernel | None = None,
                     backend: str | None = None) -> list[ChartResult]:
    """Chart statistics and signals for every block of a score field."""
    if k is None:
        k = cal.wma_kernel
    elif k.to_dict() != cal.kernel:
        raise ValueError(f"kernel mismatch: calibration used {cal.kernel}, got {k.to_dict()}")
    if sf.s_theta.shape[1] != cal.s_bar_theta.shape[0]:
        raise ValueError("score dimension does not match calibration")
    out = []
    for i in range(len(sf.blocks)):
        b, t2, zs, rw = _smoothed_block(sf, i, k, cal.chol, cal.s_bar_theta, backend)
        ct, cs, cm = scaled_statistics(t2, zs, cal.ucl_theta, cal.lcl_sigma, cal.ucl_sigma)
        sig = {
            "SWMA-theta": t2 > cal.ucl_theta,
            "SWMA-sigma": (zs < cal.lcl_sigma) | (zs > cal.ucl_sigma),
            "SWMA-M": np.abs(cm) > 1.0,
            "RWMA": (rw < cal.rwma_lcl) | (rw > cal.rwma_ucl),
        }
        power = {name: float(np.mean(m)) for name, m in sig.items()}
        out.append(ChartResult(b.source, b.top + k.l_w, b.left + k.l_w, t2, zs, ct, cs, cm, rw,
                               sig, power))
    return out


def _multichart_rate(T, Z, Ts, Zs, a):
    ucl = nearest_rank(Ts, 1.0 - a)
    lcl = nearest_rank(Zs, a / 2.0)
    ucs = nearest_rank(Zs, 1.0 - a / 2.0)
    return float(np.mean((T > ucl) | (Z < lcl) | (Z > ucs))), (ucl, lcl, ucs)


def calibrate(cl_scores, k: WmaKernel, alpha_target: float, reference: ReferenceStats,
              window: NeighborhoodSpec | dict | None = None,
              backend: str | None = None) -> ChartCalibration:
    """Empirical control limits from CL-selection scores.

    For a per-chart rate a, UCL_theta is the (1 - a) quantile of CL T^2 and the
    sigma band spans the a/2 and 1 - a/2 quantiles of CL z_sigma. A bisection
    on a (the multi-chart rate is non-decreasing in a) finds the largest a whose
    multi-chart false-alarm fraction does not exceed ``alpha_target``. RWMA
    limits are the alpha_target/2 tails of CL smoothed residuals.
    """
    if not 0.0 < alpha_target < 1.0:
        raise ValueError("alpha_target must lie in (0, 1)")
    fields = [cl_scores] if isinstance(cl_scores, ScoreField) else list(cl_scores)
    s_bar = reference.s_bar_theta
    eps = ridge_epsilon(reference.sigma_theta)
    chol = _cholesky(reference.sigma_theta, eps)
    T, Z, R = [], [], []
    for sf in fields:
        for i in range(len(sf.blocks)):
            _, t2, zs, rw = _smoothed_block(sf, i, k, chol, s_bar, backend)
            T.append(t2.ravel())
            Z.append(zs.ravel())
            R.append(rw.ravel())
    if not T:
        raise ValueError("insufficient CL pixels: no CL data")
    T, Z, R = np.concatenate(T), np.concatenate(Z), np.concatenate(R)
    n = T.size
    if n * alpha_target < 1.0:
        raise ValueError(f"insufficient CL pixels: {n} cannot resolve alpha={alpha_target}")
    Ts, Zs, Rs = np.sort(T), np.sort(Z), np.sort(R)

    trace = []
    rate_hi, lim_hi = _multichart_rate(T, Z, Ts, Zs, alpha_target)
    trace.append((alpha_target, rate_hi))
    if rate_hi <= alpha_target:
        a, rate, lim = alpha_target, rate_hi, lim_hi
    else:
        lo, hi = 0.0, alpha_target
        rate, lim = _multichart_rate(T, Z, Ts, Zs, lo)
        for _ in range(MAX_SEARCH_ITER):
            if hi - lo < 1.0 / n:
                break
            mid = 0.5 * (lo + hi)
            r_mid, l_mid = _multichart_rate(T, Z, Ts, Zs, mid)
            trace.append((mid, r_mid))
            if r_mid <= alpha_target:
                lo, rate, lim = mid, r_mid, l_mid
            else:
                hi = mid
        a = lo
    ucl, lcl, ucs = lim
    if not lcl < ucs:
        raise ValueError("degenerate sigma limits: CL z_sigma has no spread")
    if not ucl > 0:
        raise ValueError("degenerate T^2 limit")
    if isinstance(window, NeighborhoodSpec):
        window = window.to_dict()
    return ChartCalibration(
        s_bar_theta=s_bar, sigma_theta=reference.sigma_theta, ridge_eps=eps,
        ucl_theta=ucl, lcl_sigma=lcl, ucl_sigma=ucs,
        rwma_lcl=nearest_rank(Rs, alpha_target / 2.0),
        rwma_ucl=nearest_rank(Rs, 1.0 - alpha_target / 2.0),
        alpha_target=float(alpha_target), alpha_component=float(a), achieved_alpha=float(rate),
        kernel=k.to_dict(), window=window or {}, n_cl=int(n),
        search_trace=[[float(x), float(y)] for x, y in trace], _chol=chol,
    )


def score_images(model: FittedModel, ms, spec: NeighborhoodSpec) -> list[ScoreField]:
    """Standardize (if needed), extract and score each micrograph separately."""
    out = []
    for m in ms:
        if not m.standardized:
            m = standardize(m)
        out.append(compute_scores(model, extract_dataset([m], spec)))
    return out


def reference_scores(model: FittedModel, train_ms, spec: NeighborhoodSpec) -> ReferenceStats:
    """Reference statistics over the raw training scores of all training images."""
    fields = score_images(model, train_ms, spec)
    if len(fields) == 1:
        return training_reference_stats(fields[0])
    merged = ScoreField(np.concatenate([f.s_theta for f in fields]),
                        np.concatenate([f.s_sigma for f in fields]),
                        np.concatenate([f.residual for f in fields]), ())
    return training_reference_stats(merged)


def _check_window(model: FittedModel, cal: ChartCalibration, spec: NeighborhoodSpec):
    for name, w in (("model", model.meta.get("window")), ("calibration", cal.window)):
        if w and NeighborhoodSpec(**w) != spec:
            raise ValueError(f"window mismatch: {name} uses {w}, data uses {spec.to_dict()}")
    if spec.n_neighbors != model.input_dim:
        raise ValueError(f"window mismatch: model expects {model.input_dim} neighbors, "
                         f"window gives {spec.n_neighbors}")


def monitor_images(ms, model: FittedModel, cal: ChartCalibration,
                   spec: NeighborhoodSpec | None = None,
                   backend: str | None = None) -> list[ChartResult]:
    """Full pipeline per micrograph: standardize, extract, score, smooth, chart."""
    if spec is None:
        if not cal.window:
            raise ValueError("calibration carries no window; pass spec")
        spec = NeighborhoodSpec(**cal.window)
    _check_window(model, cal, spec)
    k = cal.wma_kernel
    out = []
    for m in ms:
        sf = score_images(model, [m], spec)[0]
        out.extend(chart_statistics(sf, cal, k, backend=backend))
    return out


monitor = monitor_images


def calibration_to_json(cal: ChartCalibration) -> str:
    doc = {
        "format": "microscore.calibration",
        "version": CALIBRATION_FORMAT_VERSION,
        "alpha_target": cal.alpha_target,
        "alpha_component": cal.alpha_component,
        "achieved_alpha": cal.achieved_alpha,
        "UCL_theta": cal.ucl_theta,
        "LCL_sigma": cal.lcl_sigma,
        "UCL_sigma": cal.ucl_sigma,
        "RWMA_LCL": cal.rwma_lcl,
        "RWMA_UCL": cal.rwma_ucl,
        "ridge_eps": cal.ridge_eps,
        "kernel": cal.kernel,
        "window": cal.window,
        "n_cl": cal.n_cl,
        "search_trace": cal.search_trace,
        "s_bar_theta": [float(v) for v in cal.s_bar_theta],
        "Sigma_theta": [[float(v) for v in row] for row in cal.sigma_theta],
    }
    return json.dumps(doc)


def calibration_from_json(text: str) -> ChartCalibration:
    doc = json.loads(text)
    if doc.get("format") != "microscore.calibration":
        raise ValueError("not a microscore calibration document")
    if doc.get("version") != CALIBRATION_FORMAT_VERSION:
        raise ValueError(f"unsupported calibration version {doc.get('version')}")
    return ChartCalibration(
        s_bar_theta=np.array(doc["s_bar_theta"]), sigma_theta=np.array(doc["Sigma_theta"]),
        ridge_eps=doc["ridge_eps"], ucl_theta=doc["UCL_theta"], lcl_sigma=doc["LCL_sigma"],
        ucl_sigma=doc["UCL_sigma"], rwma_lcl=doc["RWMA_LCL"], rwma_ucl=doc["RWMA_UCL"],
        alpha_target=doc["alpha_target"], alpha_component=doc["alpha_component"],
        achieved_alpha=doc["achieved_alpha"], kernel=doc["kernel"], window=doc["window"],
        n_cl=doc["n_cl"], search_trace=doc.get("search_trace", []),
    )
