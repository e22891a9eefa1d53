"""Truncated, renormalized 2D Gaussian weighted moving average (WMA)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels

__all__ = ["WmaKernel", "build_kernel", "smooth"]

# component chunk for vector fields; bounds the intermediate buffers
_CHUNK = 128


@dataclass(frozen=True)
class WmaKernel:
    l_w: int
    sigma_w: float
    weights_1d: np.ndarray

    @property
    def weights(self) -> np.ndarray:
        """(2 l_w + 1)^2 weight matrix; rows index dr, columns dc."""
        return np.outer(self.weights_1d, self.weights_1d)

    @property
    def size(self) -> int:
        return 2 * self.l_w + 1

    def to_dict(self) -> dict:
        return {"l_w": int(self.l_w), "sigma_w": float(self.sigma_w)}

    def __str__(self) -> str:
        w = self.weights
        return (f"WmaKernel(l_w={self.l_w}, sigma_w={self.sigma_w:g}, "
                f"center={w[self.l_w, self.l_w]:.6g}, corner={w[0, 0]:.6g})")


def build_kernel(l_w: int, sigma_w: float | None = None) -> WmaKernel:
    """Kernel over a (2 l_w + 1)^2 window; ``sigma_w`` defaults to ``l_w``.

    The isotropic Gaussian factorizes over rows and columns, and so does its
    normalizing sum over a square window, so the 2D weights are the outer
    product of one normalized 1D profile.
    """
    l_w = int(l_w)
    if l_w < 0:
        raise ValueError("l_w must be >= 0")
    if sigma_w is None:
        sigma_w = float(l_w) if l_w > 0 else 1.0
    sigma_w = float(sigma_w)
    if not sigma_w > 0:
        raise ValueError("sigma_w must be positive")
    d = np.arange(-l_w, l_w + 1, dtype=np.float64)
    w = np.exp(-(d * d) / (2.0 * sigma_w * sigma_w))
    w = w / w.sum()
    w.setflags(write=False)
    return WmaKernel(l_w, sigma_w, w)


def smooth(field, k: WmaKernel, backend: str | None = None) -> np.ndarray:
    """Valid-region WMA of a (h, w) or (h, w, p) field.

    Output has shape (h - 2 l_w, w - 2 l_w[, p]); entry (i, j) is the
    weighted sum centred on input pixel (i + l_w, j + l_w).
    """
    f = np.asarray(field, dtype=np.float64)
    scalar = f.ndim == 2
    if scalar:
        f = f[:, :, None]
    if f.ndim != 3:
        raise ValueError("field must be 2D or 3D")
    h, w, p = f.shape
    if h < k.size or w < k.size:
        raise ValueError(f"field too small for kernel: {h}x{w} < {k.size}x{k.size}")
    if k.l_w == 0:
        out = f.copy()
    elif p <= _CHUNK:
        out = _smooth3(f, k.weights_1d, backend)
    else:
        out = np.empty((h - 2 * k.l_w, w - 2 * k.l_w, p))
        for s in range(0, p, _CHUNK):
            out[:, :, s:s + _CHUNK] = _smooth3(f[:, :, s:s + _CHUNK], k.weights_1d, backend)
    return out[:, :, 0] if scalar else out


def _smooth3(f, w1, backend):
    tmp = kernels.correlate_valid(f, w1, 0, backend=backend)
    return kernels.correlate_valid(tmp, w1, 1, backend=backend)
