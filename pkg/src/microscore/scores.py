"""Per-pixel Fisher scores for theta and sigma at a frozen fitted model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .image import ImageBlock, PixelDataset
from .model import FittedModel, _jacobian, predict

__all__ = [
    "ScoreField",
    "MomentAccumulator",
    "ReferenceStats",
    "compute_scores",
    "training_reference_stats",
]


@dataclass(frozen=True)
class ScoreField:
    """Record-aligned scores; ``blocks`` maps record ranges back onto pixel grids."""

    s_theta: np.ndarray
    s_sigma: np.ndarray
    residual: np.ndarray
    blocks: tuple[ImageBlock, ...]
    model_id: str = ""

    def __len__(self) -> int:
        return self.s_sigma.shape[0]

    def grids(self, i: int):
        """(block, s_theta (nr, nc, p), s_sigma (nr, nc), residual (nr, nc)) for block i."""
        b = self.blocks[i]
        sl = slice(b.start, b.stop)
        shp = (b.n_rows, b.n_cols)
        return (b, self.s_theta[sl].reshape(shp + (-1,)), self.s_sigma[sl].reshape(shp),
                self.residual[sl].reshape(shp))


def compute_scores(m: FittedModel, d: PixelDataset) -> ScoreField:
    """s_theta = r / sigma^2 * dg/dtheta and s_sigma = -1/sigma + r^2/sigma^3 per record."""
    if d.X.shape[1] != m.input_dim:
        raise ValueError(f"dimension mismatch: model expects {m.input_dim} neighbors, "
                         f"dataset has {d.X.shape[1]}")
    sig = float(m.sigma_hat)
    if not sig > 0:
        raise ValueError("sigma_hat must be positive")
    r = d.y - predict(m, d.X)
    G = _jacobian(m.family, m.theta, d.X)
    G *= (r / (sig * sig))[:, None]
    s_sigma = -1.0 / sig + (r * r) / (sig ** 3)
    return ScoreField(G, s_sigma, r, d.blocks, m.meta.get("id", ""))


class MomentAccumulator:
    """Mergeable mean / scatter accumulator (pairwise update of Chan et al.).

    Each ``add`` does an exact two-pass pass over its batch, then merges;
    ``merge`` is associative up to rounding, so partial results from
    independent chunks can be combined in any grouping.
    """

    def __init__(self, dim: int):
        self.n = 0
        self.mean = np.zeros(dim)
        self.scatter = np.zeros((dim, dim))

    def add(self, batch) -> "MomentAccumulator":
        B = np.atleast_2d(np.asarray(batch, dtype=np.float64))
        if B.shape[0] == 0:
            return self
        other = MomentAccumulator(B.shape[1])
        other.n = B.shape[0]
        other.mean = B.mean(axis=0)
        C = B - other.mean
        other.scatter = C.T @ C
        return self.merge(other)

    def merge(self, other: "MomentAccumulator") -> "MomentAccumulator":
        if other.n == 0:
            return self
        if self.n == 0:
            self.n, self.mean, self.scatter = other.n, other.mean.copy(), other.scatter.copy()
            return self
        n = self.n + other.n
        delta = other.mean - self.mean
        self.scatter = self.scatter + other.scatter + np.outer(delta, delta) * (self.n * other.n / n)
        self.mean = self.mean + delta * (other.n / n)
        self.n = n
        return self

    def covariance(self) -> np.ndarray:
        if self.n < 2:
            raise ValueError("need at least 2 observations for a covariance")
        S = self.scatter / (self.n - 1)
        return 0.5 * (S + S.T)


@dataclass(frozen=True)
class ReferenceStats:
    s_bar_theta: np.ndarray
    sigma_theta: np.ndarray
    s_sigma_mean: float
    s_sigma_std: float
    residual_quantiles: np.ndarray
    n: int


def training_reference_stats(sf: ScoreField, chunk: int = 8192) -> ReferenceStats:
    """Mean and (N-1) covariance of raw training s_theta, plus sigma-score and residual summaries."""
    n = len(sf)
    if n < 2:
        raise ValueError("need at least 2 pixels for reference statistics")
    acc = MomentAccumulator(sf.s_theta.shape[1])
    for s in range(0, n, chunk):
        acc.add(sf.s_theta[s:s + chunk])
    qs = np.quantile(sf.residual, np.linspace(0.0, 1.0, 101))
    return ReferenceStats(acc.mean, acc.covariance(), float(np.mean(sf.s_sigma)),
                          float(np.std(sf.s_sigma, ddof=1)), qs, n)
