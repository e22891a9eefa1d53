# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops.

Both routines accumulate in exactly the order used by the numpy fallback in
``_pykernels`` so the two backends agree bit-for-bit on IEEE hardware without
FMA contraction.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def ar_fill(double[:, ::1] U, const double[:, ::1] phi, double c0,
            const double[:, ::1] noise, Py_ssize_t start):
    """Run the raster AR recursion in place on ``U[start:, start:]``."""
    cdef Py_ssize_t H = U.shape[0], W = U.shape[1]
    cdef Py_ssize_t L = phi.shape[0]
    cdef Py_ssize_t r, c, a, b
    cdef double v
    for r in range(start, H):
        for c in range(start, W):
            v = c0
            for a in range(L):
                for b in range(L):
                    if a == 0 and b == 0:
                        continue
                    v = v + phi[a, b] * U[r - a, c - b]
            U[r, c] = v + noise[r, c]


def correlate_valid(const double[:, :, ::1] f, const double[::1] w, int axis):
    """Valid-mode 1D correlation of a (h, w, p) field along axis 0 or 1."""
    cdef Py_ssize_t h = f.shape[0], wd = f.shape[1], p = f.shape[2]
    cdef Py_ssize_t n = w.shape[0]
    cdef Py_ssize_t i, j, t, k
    cdef double wt
    cdef double[:, :, ::1] out
    if axis == 0:
        out = np.zeros((h - n + 1, wd, p))
        for i in range(h - n + 1):
            for j in range(wd):
                for t in range(n):
                    wt = w[t]
                    for k in range(p):
                        out[i, j, k] = out[i, j, k] + wt * f[i + t, j, k]
    else:
        out = np.zeros((h, wd - n + 1, p))
        for i in range(h):
            for j in range(wd - n + 1):
                for t in range(n):
                    wt = w[t]
                    for k in range(p):
                        out[i, j, k] = out[i, j, k] + wt * f[i, j + t, k]
    return np.asarray(out)
