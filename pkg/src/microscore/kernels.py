"""Backend selection for the hot loops.

The compiled extension is used when it imports; otherwise the numpy
fallback. Set ``MICROSCORE_PURE_PYTHON=1`` to force the fallback.
"""

import os

import numpy as np

from . import _pykernels

if os.environ.get("MICROSCORE_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels
        BACKEND = "python"


def ar_fill(U, phi, c0, noise, start, backend=None):
    impl = _select(backend)
    impl.ar_fill(U, np.ascontiguousarray(phi, dtype=np.float64), float(c0),
                 np.ascontiguousarray(noise, dtype=np.float64), int(start))
    return U


def correlate_valid(f, w, axis, backend=None):
    impl = _select(backend)
    return impl.correlate_valid(np.ascontiguousarray(f, dtype=np.float64),
                                np.ascontiguousarray(w, dtype=np.float64), int(axis))


def _select(backend):
    if backend is None:
        return _impl
    if backend == "python":
        return _pykernels
    if backend == "cython":
        from . import _ckernels
        return _ckernels
    raise ValueError(f"unknown backend {backend!r}")
