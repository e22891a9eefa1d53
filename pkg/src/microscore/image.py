"""Micrograph I/O, standardization, neighborhood windows and dataset extraction."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

__all__ = [
    "Micrograph",
    "NeighborhoodSpec",
    "ImageBlock",
    "PixelDataset",
    "load_micrograph",
    "save_png16",
    "standardize",
    "extract_dataset",
    "split_reference",
    "export_dataset_csv",
]


@dataclass(frozen=True)
class Micrograph:
    pixels: np.ndarray
    id: str = ""
    standardized: bool = False

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.float64)
        if px.ndim != 2:
            raise ValueError("micrograph pixels must be a 2D array")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("zero-area image")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class NeighborhoodSpec:
    """Square window of half-width ``length_scale`` around a target pixel.

    ``non-causal`` uses every pixel of the square except the target;
    ``causal`` keeps only those preceding the target in raster order.
    """

    shape: str = "non-causal"
    length_scale: int = 5

    def __post_init__(self):
        if self.shape not in ("non-causal", "causal"):
            raise ValueError(f"unknown neighborhood shape {self.shape!r}")
        if int(self.length_scale) < 1:
            raise ValueError("length_scale must be a positive integer")

    @property
    def offsets(self) -> list[tuple[int, int]]:
        """(dr, dc) offsets in row-major order, target excluded."""
        ls = self.length_scale
        out = []
        causal = self.shape == "causal"
        for dr in range(-ls, ls + 1):
            for dc in range(-ls, ls + 1):
                if (dr, dc) == (0, 0) or (causal and (dr, dc) > (0, 0)):
                    continue
                out.append((dr, dc))
        return out

    @property
    def n_neighbors(self) -> int:
        side = 2 * self.length_scale + 1
        return side * side - 1 if self.shape == "non-causal" else (side * side - 1) // 2

    def to_dict(self) -> dict:
        return {"shape": self.shape, "length_scale": int(self.length_scale)}


@dataclass(frozen=True)
class ImageBlock:
    """A rectangle of records from one source image, stored contiguously in raster order."""

    source: str
    top: int
    left: int
    n_rows: int
    n_cols: int
    start: int

    @property
    def size(self) -> int:
        return self.n_rows * self.n_cols

    @property
    def stop(self) -> int:
        return self.start + self.size


@dataclass(frozen=True)
class PixelDataset:
    """Per-pixel (y, x, r, c) records, grouped into rectangular blocks."""

    y: np.ndarray
    X: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    spec: NeighborhoodSpec
    blocks: tuple[ImageBlock, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return self.y.shape[0]

    @property
    def sources(self) -> list[str]:
        return [b.source for b in self.blocks]

    def record(self, i: int) -> tuple[float, np.ndarray, int, int]:
        return float(self.y[i]), self.X[i], int(self.rows[i]), int(self.cols[i])

    def block(self, i: int) -> "PixelDataset":
        return self.select_blocks([i])

    def select_blocks(self, indices) -> "PixelDataset":
        blocks, parts, start = [], [], 0
        for i in indices:
            b = self.blocks[i]
            parts.append(slice(b.start, b.stop))
            blocks.append(replace(b, start=start))
            start += b.size
        idx = np.concatenate([np.arange(s.start, s.stop) for s in parts]) if parts else np.zeros(0, int)
        return PixelDataset(self.y[idx], self.X[idx], self.rows[idx], self.cols[idx],
                            self.spec, tuple(blocks))


def load_micrograph(path, format: str | None = None) -> Micrograph:
    """Read an 8- or 16-bit grayscale PNG or PGM as raw real intensities."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"file not found: {path}")
    if format is not None and format.lower() not in ("png", "pgm"):
        raise ValueError(f"unsupported format {format!r}")
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:  # PIL raises a zoo of types for bad files
        raise ValueError(f"unreadable file: {path}: {exc}") from exc
    if img.mode == "1":
        img = img.convert("L")
    if img.mode not in ("L", "I;16", "I;16B", "I;16L", "I"):
        raise ValueError(f"non-grayscale image ({img.mode}): {path}")
    px = np.asarray(img, dtype=np.float64)
    if px.ndim != 2 or px.size == 0:
        raise ValueError(f"zero-area image: {path}")
    return Micrograph(px, id=path.stem, standardized=False)


def save_png16(m: Micrograph | np.ndarray, path) -> tuple[float, float]:
    """Write a 16-bit PNG with min-max scaling; returns (min, max) for the sidecar."""
    px = m.pixels if isinstance(m, Micrograph) else np.asarray(m, dtype=np.float64)
    lo, hi = float(px.min()), float(px.max())
    span = hi - lo if hi > lo else 1.0
    q = np.round((px - lo) / span * 65535.0).astype(np.uint16)
    Image.fromarray(q).save(path)
    return lo, hi


def standardize(m: Micrograph) -> Micrograph:
    """Shift and scale pixels to zero mean and unit population variance."""
    px = m.pixels
    mu = px.mean()
    sd = px.std()
    if not np.isfinite(sd) or sd <= 1e-12 * max(1.0, abs(mu)):
        raise ValueError(f"zero variance image: {m.id!r}")
    out = (px - mu) / sd
    # second pass removes the rounding left by the first
    out = (out - out.mean()) / out.std()
    return Micrograph(out, id=m.id, standardized=True)


def extract_dataset(ms, spec: NeighborhoodSpec) -> PixelDataset:
    """One record per interior pixel (at least l_s from every border) of every image."""
    if isinstance(ms, Micrograph):
        ms = [ms]
    ls = spec.length_scale
    side = 2 * ls + 1
    offs = spec.offsets
    flat_idx = np.array([(dr + ls) * side + (dc + ls) for dr, dc in offs], dtype=np.intp)
    ys, Xs, rs, cs, blocks, start = [], [], [], [], [], 0
    for m in ms:
        if not m.standardized:
            raise ValueError(f"micrograph {m.id!r} is not standardized")
        if m.height <= 2 * ls or m.width <= 2 * ls:
            raise ValueError(f"image too small for window: {m.id!r} is {m.height}x{m.width}, l_s={ls}")
        win = np.lib.stride_tricks.sliding_window_view(m.pixels, (side, side))
        nr, nc = win.shape[:2]
        win = win.reshape(nr * nc, side * side)
        Xs.append(win[:, flat_idx])
        ys.append(win[:, ls * side + ls].copy())
        rr, cc = np.meshgrid(np.arange(ls, ls + nr), np.arange(ls, ls + nc), indexing="ij")
        rs.append(rr.ravel())
        cs.append(cc.ravel())
        blocks.append(ImageBlock(m.id, ls, ls, nr, nc, start))
        start += nr * nc
    return PixelDataset(np.concatenate(ys), np.ascontiguousarray(np.concatenate(Xs)),
                        np.concatenate(rs), np.concatenate(cs), spec, tuple(blocks))


def split_reference(d: PixelDataset, fraction: float, granularity: str = "by-image"):
    """Split reference records into (train, cl); ``fraction`` is the CL share.

    ``by-image`` keeps whole blocks together, taking the last ones for CL.
    ``by-pixel-block`` cuts every block into a top band (train) and a bottom
    band (CL) of whole record rows.
    """
    if len(d) == 0:
        raise ValueError("empty dataset")
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    if granularity == "by-image":
        n = len(d.blocks)
        n_cl = int(round(fraction * n))
        if n_cl == 0 or n_cl == n:
            raise ValueError(f"split leaves an empty side ({n} images, fraction {fraction})")
        return d.select_blocks(range(n - n_cl)), d.select_blocks(range(n - n_cl, n))
    if granularity != "by-pixel-block":
        raise ValueError(f"unknown granularity {granularity!r}")
    train_parts, cl_parts = [], []
    for b in d.blocks:
        n_cl = int(round(fraction * b.n_rows))
        if n_cl == 0 or n_cl == b.n_rows:
            raise ValueError(f"split leaves an empty side (block of {b.n_rows} rows, fraction {fraction})")
        cut = b.start + (b.n_rows - n_cl) * b.n_cols
        train_parts.append((b, b.start, cut, b.n_rows - n_cl, b.top))
        cl_parts.append((b, cut, b.stop, n_cl, b.top + b.n_rows - n_cl))
    return _assemble(d, train_parts), _assemble(d, cl_parts)


def _assemble(d, parts):
    idx, blocks, start = [], [], 0
    for b, lo, hi, nrows, top in parts:
        idx.append(np.arange(lo, hi))
        blocks.append(ImageBlock(b.source, top, b.left, nrows, b.n_cols, start))
        start += hi - lo
    idx = np.concatenate(idx)
    return PixelDataset(d.y[idx], d.X[idx], d.rows[idx], d.cols[idx], d.spec, tuple(blocks))


def export_dataset_csv(d: PixelDataset, path) -> None:
    """Debug dump with columns r, c, y, x_1..x_k (plus ``image`` when several sources)."""
    k = d.X.shape[1]
    multi = len(d.blocks) > 1
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow((["image"] if multi else []) + ["r", "c", "y"] + [f"x_{j + 1}" for j in range(k)])
        for bi, b in enumerate(d.blocks):
            for i in range(b.start, b.stop):
                row = [int(d.rows[i]), int(d.cols[i]), repr(float(d.y[i]))]
                row += [repr(float(v)) for v in d.X[i]]
                w.writerow(([b.source] if multi else []) + row)
