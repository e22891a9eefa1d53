import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from microscore.charts import (
    ChartCalibration,
    calibrate,
    calibration_from_json,
    calibration_to_json,
    chart_statistics,
    monitor_images,
    nearest_rank,
    reference_scores,
    ridge_epsilon,
    scaled_statistics,
    score_images,
    t2_statistic,
)
from microscore.image import ImageBlock, Micrograph, NeighborhoodSpec
from microscore.model import ModelFamily, train
from microscore.image import extract_dataset
from microscore.scores import ReferenceStats, ScoreField
from microscore.simulate import generate, preset_spec
from microscore.smoothing import build_kernel


def _grid_field(s_theta, s_sigma, side):
    """ScoreField of a single side x side block (l_w = 0 keeps values as-is)."""
    s_theta = np.asarray(s_theta, float).reshape(side * side, -1)
    blk = ImageBlock("syn", 0, 0, side, side, 0)
    return ScoreField(s_theta, np.asarray(s_sigma, float).ravel(), np.asarray(s_sigma, float).ravel(),
                      (blk,))


def _ref(p):
    return ReferenceStats(np.zeros(p), np.eye(p), 0.0, 1.0, np.zeros(101), 100)


class TestT2:
    def test_centered(self):
        assert t2_statistic([1.0, 2.0], [1.0, 2.0], np.eye(2)) == 0.0

    def test_scalar(self):
        assert t2_statistic([2.0], [0.0], [[4.0]]) == pytest.approx(1.0, abs=1e-15)

    def test_inverse_oracle(self, rng):
        for _ in range(20):
            A = rng.normal(size=(5, 5))
            S = A @ A.T + 0.1 * np.eye(5)
            z, sb = rng.normal(size=(2, 5))
            oracle = (z - sb) @ np.linalg.inv(S) @ (z - sb)
            assert abs(t2_statistic(z, sb, S) - oracle) <= 1e-10 * max(1.0, oracle)

    def test_reparameterization_invariance(self, rng):
        A = rng.normal(size=(4, 4))
        S = A @ A.T + np.eye(4)
        B = rng.normal(size=(4, 4)) + 3 * np.eye(4)
        z, sb = rng.normal(size=(2, 4))
        assert t2_statistic(B @ z, B @ sb, B @ S @ B.T) == pytest.approx(t2_statistic(z, sb, S),
                                                                         rel=1e-9)

    def test_monotone_along_ray(self, rng):
        S = np.diag([1.0, 3.0, 0.5])
        d = rng.normal(size=3)
        vals = [t2_statistic(t * d, np.zeros(3), S) for t in np.linspace(0, 3, 10)]
        assert np.all(np.diff(vals) > 0)

    def test_ridge_epsilon(self):
        assert ridge_epsilon(np.diag([2.0, 4.0])) == pytest.approx(3e-8)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            t2_statistic([1.0, 2.0], [0.0], np.eye(2))


class TestScaled:
    def _cm(self, ct, cs):
        # C_theta = 2 T2/UCL - 1 with UCL = 2; sigma limits [-1, 1]
        return scaled_statistics((ct + 1.0), cs, 2.0, -1.0, 1.0)

    def test_no_signal(self):
        ct, cs, cm = self._cm(0.5, -0.3)
        assert (ct, cs, cm) == pytest.approx((0.5, -0.3, 0.5))

    def test_signal(self):
        assert self._cm(1.2, 0.0)[2] == pytest.approx(1.2)

    def test_boundary(self):
        ct, cs, cm = scaled_statistics(0.0, 0.0, 5.0, -2.0, 2.0)
        assert (ct, cs, cm) == (-1.0, 0.0, -1.0)
        assert not abs(cm) > 1

    def test_negative_sign(self):
        assert self._cm(0.2, -0.9)[2] == pytest.approx(-0.9)

    @settings(max_examples=200, deadline=None)
    @given(t2=st.floats(0, 50), zs=st.floats(-10, 10), ucl=st.floats(0.1, 20),
           lcl=st.floats(-5, 0), width=st.floats(0.1, 10))
    def test_signal_equivalence(self, t2, zs, ucl, lcl, width):
        ucs = lcl + width
        ct, cs, cm = scaled_statistics(t2, zs, ucl, lcl, ucs)
        component = (t2 > ucl) or zs < lcl or zs > ucs
        # exclude floating-point ties on the limits themselves
        if min(abs(t2 - ucl), abs(zs - lcl), abs(zs - ucs)) > 1e-9 * (1 + abs(ucl) + abs(ucs)):
            assert bool(abs(cm) > 1) == component


def test_nearest_rank():
    x = np.arange(1.0, 11.0)
    assert nearest_rank(x, 0.9) == 9.0
    assert nearest_rank(x, 0.91) == 10.0
    assert nearest_rank(x, 0.0) == 1.0
    assert nearest_rank(x, 1.0) == 10.0


class TestCalibrate:
    def test_dependent_components(self, rng):
        # z_sigma = s so both sigma tails are exactly the T2 = s^2 upper tail
        s = rng.normal(size=200 * 200 // 2)
        s = np.concatenate([s, -s])
        sf = _grid_field(s, s, 200)
        cal = calibrate(sf, build_kernel(0), 0.01, _ref(1))
        assert cal.alpha_component == 0.01
        assert cal.achieved_alpha == pytest.approx(0.01, abs=1e-4)

    def test_independent_components(self, rng):
        side = 300
        sf = _grid_field(rng.normal(size=side * side), rng.normal(size=side * side), side)
        cal = calibrate(sf, build_kernel(0), 0.01, _ref(1))
        oracle = 1 - np.sqrt(1 - 0.01)  # 1 - (1 - a)^2 = alpha
        assert cal.alpha_component == pytest.approx(oracle, rel=0.08)
        assert 0.0095 <= cal.achieved_alpha <= 0.01
        assert cal.n_cl == side * side

    def test_insufficient(self, rng):
        sf = _grid_field(rng.normal(size=64), rng.normal(size=64), 8)
        with pytest.raises(ValueError, match="insufficient CL"):
            calibrate(sf, build_kernel(0), 0.01, _ref(1))


@pytest.fixture(scope="module")
def pipeline():
    spec = NeighborhoodSpec("non-causal", 2)
    k = build_kernel(3)
    train_m = generate(preset_spec("a", 0, seed=1), 96, 96, id="train")
    cl = [generate(preset_spec("a", 0, seed=s), 96, 96, id=f"cl{s}") for s in (2, 3, 4)]
    from microscore.image import standardize
    model = train(extract_dataset([standardize(train_m)], spec), ModelFamily("linear"), 0.01)
    ref = reference_scores(model, [train_m], spec)
    cal = calibrate(score_images(model, cl, spec), k, 0.01, ref, window=spec)
    return spec, k, model, cal


class TestPipeline:
    def test_calibration_rate(self, pipeline):
        _, _, _, cal = pipeline
        assert 0 < cal.achieved_alpha <= 0.01
        assert cal.lcl_sigma < cal.ucl_sigma and cal.rwma_lcl < cal.rwma_ucl

    def test_scale_invariance(self, pipeline):
        spec, _, model, cal = pipeline
        m = generate(preset_spec("a", 0, seed=9), 80, 80, id="mon")
        a = monitor_images([m], model, cal)[0]
        b = monitor_images([Micrograph(3.5 * m.pixels - 2.0, id="mon")], model, cal)[0]
        assert np.allclose(a.c_m, b.c_m, atol=1e-8)
        assert {k: v for k, v in a.power.items()} == b.power

    def test_result_geometry(self, pipeline):
        spec, k, model, cal = pipeline
        r = monitor_images([generate(preset_spec("a", 0, seed=9), 80, 80)], model, cal)[0]
        n = 80 - 2 * 2 - 2 * 3
        assert r.shape == (n, n)
        assert (r.top, r.left) == (5, 5)
        assert set(r.power) == {"SWMA-theta", "SWMA-sigma", "SWMA-M", "RWMA"}
        any_comp = r.signals["SWMA-theta"] | r.signals["SWMA-sigma"]
        assert np.array_equal(any_comp, r.signals["SWMA-M"])

    def test_window_mismatch(self, pipeline):
        _, _, model, cal = pipeline
        m = generate(preset_spec("a", 0, seed=9), 64, 64)
        with pytest.raises(ValueError, match="window mismatch"):
            monitor_images([m], model, cal, spec=NeighborhoodSpec("non-causal", 1))

    def test_kernel_mismatch(self, pipeline):
        spec, _, model, cal = pipeline
        sf = score_images(model, [generate(preset_spec("a", 0, seed=9), 64, 64)], spec)[0]
        with pytest.raises(ValueError, match="kernel mismatch"):
            chart_statistics(sf, cal, build_kernel(4))

    def test_constant_monitor_image(self, pipeline):
        _, _, model, cal = pipeline
        with pytest.raises(ValueError, match="zero variance"):
            monitor_images([Micrograph(np.ones((40, 40)))], model, cal)

    def test_json_round_trip(self, pipeline):
        _, _, model, cal = pipeline
        cal2 = calibration_from_json(calibration_to_json(cal))
        assert isinstance(cal2, ChartCalibration)
        assert np.array_equal(cal2.sigma_theta, cal.sigma_theta)
        assert (cal2.ucl_theta, cal2.lcl_sigma, cal2.ucl_sigma) == (cal.ucl_theta, cal.lcl_sigma,
                                                                    cal.ucl_sigma)
        assert cal2.kernel == cal.kernel and cal2.window == cal.window
        m = generate(preset_spec("a", 0, seed=11), 64, 64)
        r1 = monitor_images([m], model, cal)[0]
        r2 = monitor_images([m], model, cal2)[0]
        assert np.array_equal(r1.c_m, r2.c_m)
