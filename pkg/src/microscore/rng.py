"""Counter-based standard normal draws keyed by (seed, stream, row, col).

A value depends only on its key, never on how many values were drawn before
it, so generated fields do not depend on traversal order or field size.
"""

import numpy as np

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix64(x):
    x = x + np.uint64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def _key(seed, stream):
    with np.errstate(over="ignore"):
        k = _splitmix64(np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF))
        return _splitmix64(k ^ np.uint64(int(stream) & 0xFFFFFFFFFFFFFFFF))


def _uniform(key, counter):
    # 53-bit mantissa, strictly inside (0, 1]
    with np.errstate(over="ignore"):
        h = _splitmix64(counter ^ key)
        h = _splitmix64(h + key)
    return ((h >> np.uint64(11)).astype(np.float64) + 1.0) * (1.0 / 9007199254740992.0)


def normal_field(seed, stream, shape, origin=(0, 0)):
    """Standard normals on a grid; entry (i, j) is keyed by origin + (i, j)."""
    rows = np.arange(shape[0], dtype=np.uint64) + np.uint64(origin[0])
    cols = np.arange(shape[1], dtype=np.uint64) + np.uint64(origin[1])
    counter = (rows[:, None] << np.uint64(33)) | (cols[None, :] << np.uint64(1))
    key = _key(seed, stream)
    u1 = _uniform(key, counter)
    u2 = _uniform(key, counter | np.uint64(1))
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def derive_seed(seed, *labels):
    """Deterministically fan a top-level seed out to a component seed."""
    k = np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF)
    with np.errstate(over="ignore"):
        for lab in labels:
            if isinstance(lab, str):
                v = 0
                for ch in lab.encode():
                    v = (v * 131 + ch) & 0xFFFFFFFFFFFFFFFF
            else:
                v = int(lab) & 0xFFFFFFFFFFFFFFFF
            k = _splitmix64(k ^ _splitmix64(np.uint64(v)))
    return int(k >> np.uint64(1))
