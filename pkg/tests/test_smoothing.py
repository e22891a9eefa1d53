import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from microscore.smoothing import build_kernel, smooth


def _brute(field, l_w, sigma_w):
    """Direct double sum with the 2D normalizer computed over the full window."""
    h, w = field.shape
    norm = sum(math.exp(-(a * a + b * b) / (2 * sigma_w ** 2))
               for a in range(-l_w, l_w + 1) for b in range(-l_w, l_w + 1))
    out = np.zeros((h - 2 * l_w, w - 2 * l_w))
    for i in range(l_w, h - l_w):
        for j in range(l_w, w - l_w):
            acc = 0.0
            for a in range(-l_w, l_w + 1):
                for b in range(-l_w, l_w + 1):
                    acc += math.exp(-(a * a + b * b) / (2 * sigma_w ** 2)) * field[i + a, j + b]
            out[i - l_w, j - l_w] = acc / norm
    return out


class TestKernel:
    def test_degenerate(self):
        assert build_kernel(0).weights.tolist() == [[1.0]]

    def test_flat_limit(self):
        assert np.allclose(build_kernel(1, 1e6).weights, 1 / 9, atol=1e-9)

    def test_center_weight_formula(self):
        # 1 / (1 + 4 e^{-1/2} + 4 e^{-1}); note this evaluates to 0.20418, not 0.19946
        oracle = 1.0 / (1 + 4 * math.exp(-0.5) + 4 * math.exp(-1.0))
        assert build_kernel(1, 1.0).weights[1, 1] == pytest.approx(oracle, abs=1e-15)
        assert oracle == pytest.approx(0.2041799555716581, abs=1e-15)

    @pytest.mark.parametrize("l_w", [1, 5, 30])
    def test_sums_to_one(self, l_w):
        w = build_kernel(l_w).weights
        assert w.shape == (2 * l_w + 1,) * 2
        assert abs(w.sum() - 1) < 1e-12
        assert np.allclose(w, w.T) and np.allclose(w, w[::-1, ::-1])

    def test_default_sigma(self):
        assert build_kernel(7).sigma_w == 7.0

    def test_invalid(self):
        with pytest.raises(ValueError):
            build_kernel(-1)
        with pytest.raises(ValueError):
            build_kernel(2, 0.0)


class TestSmooth:
    def test_constant(self):
        out = smooth(np.full((12, 11), 3.25), build_kernel(3))
        assert out.shape == (6, 5)
        assert np.allclose(out, 3.25, atol=1e-14)

    def test_impulse(self):
        f = np.zeros((5, 5))
        f[2, 2] = 1.0
        k = build_kernel(1, 1.0)
        out = smooth(f, k)
        assert np.allclose(out, k.weights[::-1, ::-1], atol=1e-16)
        assert out[1, 1] == pytest.approx(k.weights[1, 1])

    @pytest.mark.parametrize("backend", ["python", None])
    def test_brute_force(self, rng, backend):
        f = rng.normal(size=(20, 20))
        out = smooth(f, build_kernel(3, 2.0), backend=backend)
        assert np.max(np.abs(out - _brute(f, 3, 2.0))) < 1e-12

    def test_vector_field_componentwise(self, rng):
        f = rng.normal(size=(15, 14, 3))
        k = build_kernel(2)
        out = smooth(f, k)
        for c in range(3):
            assert np.allclose(out[:, :, c], smooth(f[:, :, c], k), atol=1e-14)

    def test_many_components_chunked(self, rng):
        f = rng.normal(size=(9, 9, 300))
        k = build_kernel(1)
        out = smooth(f, k)
        assert np.allclose(out[:, :, 299], smooth(f[:, :, 299], k), atol=1e-14)

    def test_too_small(self):
        with pytest.raises(ValueError, match="too small"):
            smooth(np.zeros((4, 10)), build_kernel(2))

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), a=st.floats(-5, 5), b=st.floats(-5, 5),
           l_w=st.integers(0, 3))
    def test_linearity_and_transpose(self, seed, a, b, l_w):
        rng = np.random.default_rng(seed)
        f, g = rng.normal(size=(2, 10, 9))
        k = build_kernel(l_w)
        lhs = smooth(a * f + b * g, k)
        assert np.allclose(lhs, a * smooth(f, k) + b * smooth(g, k), atol=1e-12)
        assert np.allclose(smooth(f.T, k), smooth(f, k).T, atol=1e-13)
