"""Nonstationarity diagnostics: clustering and PCA views of smoothed score vectors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, optimize, signal

from .image import Micrograph, NeighborhoodSpec, extract_dataset, standardize
from .model import ModelFamily, TrainOptions, train
from .scores import compute_scores
from .smoothing import WmaKernel, smooth

__all__ = [
    "PhaseLabeling",
    "PcaProjection",
    "pca_full",
    "pca_top3",
    "cluster_scores",
    "estimate_k_hint",
    "segmentation_accuracy",
    "label_agreement",
    "smoothed_score_field",
    "diagnose",
]


@dataclass
class PhaseLabeling:
    labels: np.ndarray
    k: int
    centroids: np.ndarray
    inertia: float
    seed: int
    sizes: np.ndarray
    trace: list = field(default_factory=list)


@dataclass
class PcaProjection:
    components: np.ndarray  # (3, p), rows orthonormal
    explained: np.ndarray  # (3,) variance shares
    scores: np.ndarray  # (n, 3)
    rgb: np.ndarray  # (n, 3) in [0, 1]
    magnitude: np.ndarray  # (n,)
    grid_shape: tuple | None = None
    origin: tuple = (0, 0)


def _as_points(z):
    Z = np.asarray(z, dtype=np.float64)
    if Z.ndim == 3:
        return Z.reshape(-1, Z.shape[2]), Z.shape[:2]
    if Z.ndim == 2:
        return Z, None
    raise ValueError("expected a (n, p) or (h, w, p) array")


def pca_full(X):
    """All principal axes of mean-centred rows, descending variance, sign-canonical.

    Each axis is flipped so its largest-magnitude loading is positive.
    Returns (mean, eigenvalues, components as rows).
    """
    mu = X.mean(axis=0)
    C = X - mu
    cov = C.T @ C / max(X.shape[0] - 1, 1)
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    order = np.argsort(vals)[::-1]
    vals = np.clip(vals[order], 0.0, None)
    vecs = vecs[:, order].T
    idx = np.argmax(np.abs(vecs), axis=1)
    sign = np.sign(vecs[np.arange(vecs.shape[0]), idx])
    sign[sign == 0] = 1.0
    return mu, vals, vecs * sign[:, None]


def pca_top3(z, origin=(0, 0)) -> PcaProjection:
    """Top-3 PCA scores of smoothed score vectors, plus RGB coding and magnitudes."""
    X, grid = _as_points(z)
    if X.shape[0] < 4:
        raise ValueError("need at least 4 pixels for PCA")
    magnitude = np.linalg.norm(X, axis=1)
    if X.shape[1] < 3:
        X = np.hstack([X, np.zeros((X.shape[0], 3 - X.shape[1]))])
    mu, vals, vecs = pca_full(X)
    total = vals.sum()
    shares = vals[:3] / total if total > 0 else np.zeros(3)
    V = vecs[:3]
    S = (X - mu) @ V.T
    lo, hi = S.min(axis=0), S.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    rgb = np.where(hi > lo, (S - lo) / span, 0.5)
    return PcaProjection(V, shares, S, rgb, magnitude, grid, tuple(origin))


def _kmeanspp(X, k, rng, sq):
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = np.maximum(sq - 2 * X @ centers[0] + centers[0] @ centers[0], 0.0)
    for j in range(1, k):
        tot = d2.sum()
        i = rng.choice(n, p=d2 / tot) if tot > 0 else rng.integers(n)
        centers[j] = X[i]
        d2 = np.minimum(d2, np.maximum(sq - 2 * X @ centers[j] + centers[j] @ centers[j], 0.0))
    return centers


def _assign(X, C, sq):
    """Nearest-centroid labels and the total squared distance, from one GEMM."""
    D = np.einsum("ij,ij->i", C, C)[None, :] - 2.0 * (X @ C.T)
    lab = np.argmin(D, axis=1)
    mind = D[np.arange(X.shape[0]), lab] + sq
    return lab, float(np.maximum(mind, 0.0).sum())


def _lloyd(X, k, rng, sq, max_iter, tol):
    C = _kmeanspp(X, k, rng, sq)
    lab, inertia = _assign(X, C, sq)
    trace = [inertia]
    for _ in range(max_iter):
        counts = np.bincount(lab, minlength=k)
        onehot = np.zeros((X.shape[0], k))
        onehot[np.arange(X.shape[0]), lab] = 1.0
        sums = onehot.T @ X
        for j in range(k):
            if counts[j]:
                C[j] = sums[j] / counts[j]
            else:  # re-seed an empty cluster at the worst-fit point
                resid = sq - 2.0 * np.einsum("ij,ij->i", X, C[lab]) + np.einsum("ij,ij->i", C[lab], C[lab])
                C[j] = X[np.argmax(resid)]
        new, inertia = _assign(X, C, sq)
        trace.append(inertia)
        if np.array_equal(new, lab):
            break
        lab = new
        if trace[-2] - trace[-1] <= tol * trace[-2]:
            break
    return C, lab, trace


def cluster_scores(z, k: int, seed: int = 0, restarts: int = 10,
                   max_iter: int = 300, tol: float = 1e-6) -> PhaseLabeling:
    """k-means (k-means++ seeding, Lloyd iterations) keeping the best of ``restarts``.

    Lloyd stops when labels stop changing or the relative inertia decrease falls
    to ``tol`` (set 0 to run to a fixed point). Labels are renumbered by
    descending cluster size.
    """
    X, grid = _as_points(z)
    n = X.shape[0]
    if n == 0:
        raise ValueError("empty field")
    if not 1 <= k <= n:
        raise ValueError("k must satisfy 1 <= k <= pixel count")
    # centering keeps the expanded squared distances free of cancellation
    mu = X.mean(axis=0)
    Xc = X - mu
    sq = np.einsum("ij,ij->i", Xc, Xc)
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        C, lab, trace = _lloyd(Xc, k, rng, sq, max_iter, tol)
        if best is None or trace[-1] < best[2][-1]:
            best = (C.copy(), lab.copy(), trace)
    C, lab, trace = best
    C = C + mu
    sizes = np.bincount(lab, minlength=k)
    order = sorted(range(k), key=lambda j: (-sizes[j], j))
    remap = np.empty(k, dtype=np.int64)
    remap[order] = np.arange(k)
    labels = remap[lab]
    if grid is not None:
        labels = labels.reshape(grid)
    return PhaseLabeling(labels, k, C[order], trace[-1], int(seed), sizes[order], trace)


def estimate_k_hint(p: PcaProjection, bins: int = 64, smooth_bins: float = 2.0,
                    prominence: float = 0.15):
    """Advisory phase count: modes of the smoothed histogram of ||z||.

    Also returns the surface export rows (r, c, height, R, G, B) that a human
    should inspect; the hint is a starting point, not an estimate of record.
    """
    mag = p.magnitude
    if mag.size == 0:
        raise ValueError("empty projection")
    lo, hi = float(mag.min()), float(mag.max())
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        hint = 1
    else:
        counts, _ = np.histogram(mag, bins=bins, range=(lo, hi))
        dens = ndimage.gaussian_filter1d(counts.astype(float), smooth_bins, mode="constant")
        padded = np.concatenate([[0.0], dens, [0.0]])
        peaks, _ = signal.find_peaks(padded, prominence=prominence * dens.max())
        hint = max(1, len(peaks))
    return hint, surface_rows(p)


def surface_rows(p: PcaProjection) -> np.ndarray:
    n = p.magnitude.shape[0]
    if p.grid_shape is not None:
        rr, cc = np.meshgrid(np.arange(p.grid_shape[0]), np.arange(p.grid_shape[1]), indexing="ij")
        rr = rr.ravel() + p.origin[0]
        cc = cc.ravel() + p.origin[1]
    else:
        rr, cc = np.arange(n), np.zeros(n)
    return np.column_stack([rr, cc, p.magnitude, p.rgb])


def _confusion(a, b):
    ka, kb = int(a.max()) + 1, int(b.max()) + 1
    k = max(ka, kb)
    M = np.zeros((k, k), dtype=np.int64)
    np.add.at(M, (a, b), 1)
    return M


def label_agreement(a, b) -> float:
    """Fraction of matching pixels under the best one-to-one relabelling."""
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    if a.size == 0:
        return 1.0
    M = _confusion(a, b)
    ri, ci = optimize.linear_sum_assignment(M, maximize=True)
    return float(M[ri, ci].sum()) / a.size


def segmentation_accuracy(labels, truth, boundary_margin: int = 0) -> float:
    """Permutation-matched agreement, ignoring pixels within ``boundary_margin`` of a truth edge."""
    lab = np.asarray(labels.labels if isinstance(labels, PhaseLabeling) else labels)
    truth = np.asarray(truth)
    if lab.shape != truth.shape:
        raise ValueError("shape mismatch")
    keep = np.ones(truth.shape, bool)
    if boundary_margin > 0:
        size = 2 * boundary_margin + 1
        keep = (ndimage.maximum_filter(truth, size=size, mode="nearest")
                == ndimage.minimum_filter(truth, size=size, mode="nearest"))
    return label_agreement(lab[keep], truth[keep])


def smoothed_score_field(model, m: Micrograph, spec: NeighborhoodSpec, k: WmaKernel,
                         backend=None):
    """(z grid (h, w, p), origin) for one standardized micrograph."""
    sf = compute_scores(model, extract_dataset([m], spec))
    b, st, _, _ = sf.grids(0)
    return smooth(st, k, backend=backend), (b.top + k.l_w, b.left + k.l_w)


@dataclass
class Diagnosis:
    model: object
    z_fields: list
    origins: list
    labelings: dict  # seed -> list of per-image label grids
    best: PhaseLabeling
    projection: PcaProjection | None
    k: int


def diagnose(ms, spec: NeighborhoodSpec, k_wma: WmaKernel, k: int,
             family: ModelFamily | None = None, lam: float = 0.01, seeds=(0,),
             cluster_space: str = "full", train_opts: TrainOptions | None = None,
             backend=None) -> Diagnosis:
    """Train one model on the target images themselves, smooth their scores, cluster.

    ``cluster_space`` is ``full`` (all score components) or ``pca3``.
    """
    if cluster_space not in ("full", "pca3"):
        raise ValueError(f"unknown cluster_space {cluster_space!r}")
    family = family or ModelFamily("linear")
    ms = [m if m.standardized else standardize(m) for m in ms]
    model = train(extract_dataset(ms, spec), family, lam, train_opts)
    zs, origins = [], []
    for m in ms:
        z, o = smoothed_score_field(model, m, spec, k_wma, backend)
        zs.append(z)
        origins.append(o)
    X = np.concatenate([z.reshape(-1, z.shape[2]) for z in zs])
    proj = pca_top3(X) if X.shape[0] >= 4 else None
    pts = proj.scores if cluster_space == "pca3" else X
    labelings, best = {}, None
    for s in seeds:
        lab = cluster_scores(pts, k, seed=s)
        parts, off = [], 0
        for z in zs:
            n = z.shape[0] * z.shape[1]
            parts.append(lab.labels[off:off + n].reshape(z.shape[:2]))
            off += n
        labelings[s] = parts
        if best is None or lab.inertia < best.inertia:
            best = lab
    return Diagnosis(model, zs, origins, labelings, best, proj, k)
