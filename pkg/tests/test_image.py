import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from microscore.image import (
    Micrograph,
    NeighborhoodSpec,
    export_dataset_csv,
    extract_dataset,
    load_micrograph,
    save_png16,
    split_reference,
    standardize,
)

from .conftest import random_micrograph


class TestLoad:
    def test_png_8bit(self, tmp_path):
        p = tmp_path / "a.png"
        Image.fromarray(np.array([[0, 255], [255, 0]], dtype=np.uint8)).save(p)
        m = load_micrograph(p)
        assert np.array_equal(m.pixels, [[0, 255], [255, 0]])
        assert not m.standardized
        assert m.id == "a"

    def test_single_pixel_pgm(self, tmp_path):
        p = tmp_path / "one.pgm"
        p.write_bytes(b"P5\n1 1\n255\n" + bytes([7]))
        assert load_micrograph(p, "pgm").pixels.tolist() == [[7.0]]

    def test_png_16bit_round_trip(self, tmp_path, rng):
        px = rng.normal(size=(6, 5))
        p = tmp_path / "x.png"
        lo, hi = save_png16(px, p)
        m = load_micrograph(p)
        assert m.pixels.max() == 65535 and m.pixels.min() == 0
        back = m.pixels / 65535 * (hi - lo) + lo
        assert np.allclose(back, px, atol=(hi - lo) / 65535)

    def test_rgb_rejected(self, tmp_path):
        p = tmp_path / "c.png"
        Image.fromarray(np.zeros((3, 3, 3), dtype=np.uint8)).save(p)
        with pytest.raises(ValueError, match="non-grayscale"):
            load_micrograph(p)

    def test_missing_and_garbage(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_micrograph(tmp_path / "nope.png")
        bad = tmp_path / "bad.png"
        bad.write_bytes(b"not an image")
        with pytest.raises(ValueError, match="unreadable"):
            load_micrograph(bad)

    def test_zero_area(self):
        with pytest.raises(ValueError, match="zero-area"):
            Micrograph(np.zeros((0, 3)))


class TestStandardize:
    def test_three_values(self):
        out = standardize(Micrograph([[0.0, 2.0, 4.0]]))
        assert np.allclose(out.pixels, [[-1.22474487, 0.0, 1.22474487]], atol=1e-8)
        assert out.standardized

    def test_idempotent(self, rng):
        m = random_micrograph(rng, 10, 12)
        assert np.allclose(standardize(m).pixels, m.pixels, atol=1e-9)

    def test_constant_rejected(self):
        with pytest.raises(ValueError, match="zero variance"):
            standardize(Micrograph(np.full((4, 4), 5.0)))

    def test_moments(self, rng):
        out = standardize(Micrograph(rng.gamma(2.0, 3.0, size=(31, 17)) + 100))
        assert abs(out.pixels.mean()) < 1e-9
        assert abs(out.pixels.std() - 1) < 1e-9

    @settings(max_examples=40, deadline=None)
    @given(a=st.floats(0.01, 1e3), b=st.floats(-1e3, 1e3), seed=st.integers(0, 2**16))
    def test_affine_invariance(self, a, b, seed):
        px = np.random.default_rng(seed).normal(size=(7, 9))
        s1 = standardize(Micrograph(px)).pixels
        s2 = standardize(Micrograph(a * px + b)).pixels
        assert np.allclose(s1, s2, atol=1e-9)


class TestWindows:
    def test_noncausal_count_and_order(self):
        spec = NeighborhoodSpec("non-causal", 1)
        assert spec.n_neighbors == 8 == len(spec.offsets)
        assert spec.offsets[0] == (-1, -1) and spec.offsets[-1] == (1, 1)

    def test_causal_precedes_target(self):
        spec = NeighborhoodSpec("causal", 2)
        assert len(spec.offsets) == spec.n_neighbors == 12
        assert all((dr, dc) < (0, 0) for dr, dc in spec.offsets)

    def test_bad_spec(self):
        with pytest.raises(ValueError):
            NeighborhoodSpec("diagonal", 1)
        with pytest.raises(ValueError):
            NeighborhoodSpec("causal", 0)


class TestExtract:
    def test_single_interior_pixel(self):
        px = np.arange(9.0).reshape(3, 3)
        m = standardize(Micrograph(px))
        d = extract_dataset([m], NeighborhoodSpec("non-causal", 1))
        assert len(d) == 1
        z = m.pixels.ravel()
        assert d.y[0] == z[4]
        assert np.array_equal(d.X[0], np.delete(z, 4))
        assert (d.rows[0], d.cols[0]) == (1, 1)

    def test_count_5x5(self, rng):
        d = extract_dataset([random_micrograph(rng, 5, 5)], NeighborhoodSpec("non-causal", 1))
        assert len(d) == 9

    def test_too_small(self, rng):
        with pytest.raises(ValueError, match="too small"):
            extract_dataset([random_micrograph(rng, 3, 3)], NeighborhoodSpec("non-causal", 2))

    def test_requires_standardized(self, rng):
        with pytest.raises(ValueError, match="not standardized"):
            extract_dataset([Micrograph(rng.normal(size=(5, 5)))], NeighborhoodSpec())

    @pytest.mark.parametrize("shape", ["non-causal", "causal"])
    @pytest.mark.parametrize("ls", [1, 2, 3])
    def test_round_trip_exhaustive(self, rng, shape, ls):
        m = random_micrograph(rng, 16, 13)
        spec = NeighborhoodSpec(shape, ls)
        d = extract_dataset([m], spec)
        assert len(d) == (16 - 2 * ls) * (13 - 2 * ls)
        for i in range(len(d)):
            y, x, r, c = d.record(i)
            assert ls <= r < 16 - ls and ls <= c < 13 - ls
            assert y == m.pixels[r, c]
            assert np.array_equal(x, [m.pixels[r + dr, c + dc] for dr, dc in spec.offsets])

    @settings(max_examples=30, deadline=None)
    @given(h=st.integers(3, 20), w=st.integers(3, 20), ls=st.integers(1, 4))
    def test_count_formula(self, h, w, ls):
        m = random_micrograph(np.random.default_rng(h * 100 + w), h, w)
        spec = NeighborhoodSpec("non-causal", ls)
        if h <= 2 * ls or w <= 2 * ls:
            with pytest.raises(ValueError):
                extract_dataset([m], spec)
        else:
            assert len(extract_dataset([m], spec)) == (h - 2 * ls) * (w - 2 * ls)

    def test_multi_image_blocks(self, rng):
        ms = [random_micrograph(rng, 6, 7, f"m{i}") for i in range(3)]
        d = extract_dataset(ms, NeighborhoodSpec("non-causal", 1))
        assert d.sources == ["m0", "m1", "m2"]
        assert [b.start for b in d.blocks] == [0, 20, 40]


class TestSplit:
    def test_by_image_counts(self, rng):
        ms = [random_micrograph(rng, 6, 6, f"m{i}") for i in range(5)]
        d = extract_dataset(ms, NeighborhoodSpec("non-causal", 1))
        train, cl = split_reference(d, 0.2, "by-image")
        assert train.sources == ["m0", "m1", "m2", "m3"] and cl.sources == ["m4"]
        assert len(train) + len(cl) == len(d)

    def test_empty_side(self, rng):
        m = random_micrograph(rng, 3, 4)
        d = extract_dataset([m], NeighborhoodSpec("non-causal", 1))
        assert len(d) == 2
        with pytest.raises(ValueError, match="empty side"):
            split_reference(d, 0.999, "by-pixel-block")
        with pytest.raises(ValueError, match="empty side"):
            split_reference(d, 0.999, "by-image")

    def test_four_image_cl_count(self):
        ls = 5
        ms = [random_micrograph(np.random.default_rng(i), 256, 256, f"r{i}") for i in range(5)]
        d = extract_dataset(ms, NeighborhoodSpec("non-causal", ls))
        _, cl = split_reference(d, 0.8, "by-image")
        assert len(cl) == 4 * (256 - 2 * ls) ** 2

    def test_by_pixel_block_disjoint_bands(self, rng):
        d = extract_dataset([random_micrograph(rng, 12, 9)], NeighborhoodSpec("non-causal", 1))
        train, cl = split_reference(d, 0.3, "by-pixel-block")
        assert len(train) + len(cl) == len(d)
        assert train.rows.max() < cl.rows.min()
        assert cl.blocks[0].top == cl.rows.min()
        assert set(zip(train.rows, train.cols)).isdisjoint(zip(cl.rows, cl.cols))


def test_export_csv(tmp_path, rng):
    d = extract_dataset([random_micrograph(rng, 4, 4)], NeighborhoodSpec("non-causal", 1))
    p = tmp_path / "d.csv"
    export_dataset_csv(d, p)
    rows = list(csv.reader(open(p)))
    assert rows[0] == ["r", "c", "y"] + [f"x_{i}" for i in range(1, 9)]
    assert len(rows) == 5
    assert float(rows[1][2]) == d.y[0]
