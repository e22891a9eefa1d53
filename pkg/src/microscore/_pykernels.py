"""Numpy implementations of the hot loops, used when the extension is absent.

Accumulation order mirrors ``_ckernels.pyx`` term by term.
"""

import numpy as np


def ar_fill(U, phi, c0, noise, start):
    """Run the raster AR recursion in place on ``U[start:, start:]``.

    Every dependency of pixel (r, c) lies on an earlier anti-diagonal
    ``r + c``, so each anti-diagonal is evaluated as one vector operation.
    """
    H, W = U.shape
    L = phi.shape[0]
    terms = [(a, b, phi[a, b]) for a in range(L) for b in range(L) if a or b]
    for d in range(2 * start, H + W - 1):
        r_lo = max(start, d - (W - 1))
        r_hi = min(H - 1, d - start)
        if r_lo > r_hi:
            continue
        rr = np.arange(r_lo, r_hi + 1)
        cc = d - rr
        v = np.full(rr.shape, c0, dtype=np.float64)
        for a, b, coef in terms:
            v = v + coef * U[rr - a, cc - b]
        U[rr, cc] = v + noise[rr, cc]


def correlate_valid(f, w, axis):
    """Valid-mode 1D correlation of a (h, w, p) field along axis 0 or 1."""
    n = w.shape[0]
    m = f.shape[axis] - n + 1
    shape = list(f.shape)
    shape[axis] = m
    out = np.zeros(shape)
    for t in range(n):
        if axis == 0:
            out = out + w[t] * f[t:t + m]
        else:
            out = out + w[t] * f[:, t:t + m]
    return out
