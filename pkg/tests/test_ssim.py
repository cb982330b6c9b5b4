import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from micrometric import DataRange, MetricConfig, WindowStats, local_statistics, make_window, mssim
from micrometric.errors import InputError
from micrometric.ssim import scaled_ssim_objective, ssim_components

from oracles import mssim_bruteforce, scaled_objective, window_stats_bruteforce


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def test_gaussian_window_normalized():
    w = make_window()
    assert w.side == 11 and w.sigma == 1.5
    assert math.isclose(w.weights.sum(), 1.0, rel_tol=0, abs_tol=1e-15)
    np.testing.assert_allclose(w.weights, w.weights.T)


def test_uniform_window_is_flat():
    w = make_window("uniform", 7)
    np.testing.assert_allclose(w.weights, np.full((7, 7), 1 / 49))


@pytest.mark.parametrize("side", [4, 1, 0])
def test_bad_window_side(side):
    with pytest.raises(InputError):
        make_window("gaussian", side)


@pytest.mark.parametrize("kind,side", [("gaussian", 11), ("uniform", 7)])
def test_stats_match_bruteforce(rng, kind, side):
    w = make_window(kind, side)
    x = rng.uniform(0, 1000, (23, 31)) + 5e4
    y = rng.uniform(0, 3, (23, 31))
    got = local_statistics(x, y, w)
    ref = window_stats_bruteforce(x, y, w.weights)
    for k, name in enumerate(("ux", "uy", "vx", "vy", "vxy")):
        np.testing.assert_allclose(getattr(got, name), ref[k], rtol=1e-10, atol=1e-9, err_msg=name)


def test_mssim_matches_bruteforce(rng):
    w = make_window()
    x = rng.random((20, 25))
    y = x + 0.2 * rng.standard_normal(x.shape)
    gamma = float(x.max() - x.min())
    got = mssim(x, y, MetricConfig(window=w)).mssim
    assert abs(got - mssim_bruteforce(x, y, w.weights, gamma)) < 1e-12


def test_identical_images_score_one(rng):
    x = rng.random((40, 40))
    b = mssim(x, x)
    assert b.mssim == pytest.approx(1.0, abs=1e-12)
    for v in b.component_means().values():
        assert v == pytest.approx(1.0, abs=1e-12)


def test_valid_region_shape(rng):
    x = rng.random((30, 17))
    b = mssim(x, x)
    assert (b.valid_height, b.valid_width) == (20, 7)


def test_components_multiply_to_ssim(rng):
    x = rng.random((25, 25))
    y = rng.random((25, 25))
    b = mssim(x, y)
    np.testing.assert_allclose(b.luminance_map * b.contrast_map * b.structure_map, b.ssim_map,
                               rtol=1e-9, atol=1e-12)


def test_component_hand_values():
    # one window worked out by hand
    s = WindowStats(np.array(2.0), np.array(1.0), np.array(4.0), np.array(1.0), np.array(1.0))
    lum, con, st_ = ssim_components(s, 0.0, 0.0, 0.0)
    assert float(lum) == pytest.approx(4 / 5)
    assert float(con) == pytest.approx(4 / 5)
    assert float(st_) == pytest.approx(1 / 2)


def test_data_range_policies(rng):
    x = rng.random((16, 16)) * 10 + 3
    assert DataRange.auto().resolve(x) == pytest.approx(np.ptp(x))
    assert DataRange.dtype(16).resolve() == 65535.0
    assert DataRange.explicit(2.5).resolve(x) == 2.5
    with pytest.raises(InputError):
        DataRange.gt_dataset().resolve(x)
    with pytest.raises(InputError):
        DataRange.gt_image().resolve(np.ones((16, 16)))
    with pytest.raises(InputError):
        DataRange.explicit(-1.0)


def test_gamma_override(rng):
    x = rng.random((20, 20))
    y = rng.random((20, 20))
    assert mssim(x, y, gamma=7.0).gamma == 7.0
    assert mssim(x, y, MetricConfig(data_range=DataRange.explicit(7.0))).mssim == mssim(x, y, gamma=7.0).mssim


@pytest.mark.parametrize("x,y", [
    (np.zeros((20, 20)), np.zeros((20, 21))),
    (np.zeros((5, 20)), np.zeros((5, 20))),
    (np.zeros(20), np.zeros(20)),
])
def test_bad_shapes(x, y):
    with pytest.raises(InputError):
        mssim(x, y, gamma=1.0)


def test_nonfinite_rejected():
    x = np.ones((20, 20))
    x[3, 4] = np.nan
    with pytest.raises(InputError):
        mssim(x, np.ones((20, 20)), gamma=1.0)


def test_bias_correction_requires_uniform():
    with pytest.raises(InputError):
        MetricConfig(bias_corrected=True)


def test_bias_correction_scales_variances(rng):
    w = make_window("uniform", 7)
    x, y = rng.random((15, 15)), rng.random((15, 15))
    a = local_statistics(x, y, w)
    b = local_statistics(x, y, w, bias_corrected=True)
    np.testing.assert_allclose(b.vxy, a.vxy * 49 / 48)
    np.testing.assert_allclose(b.ux, a.ux)


def test_scaled_objective_matches_scaling_the_image(rng):
    x = rng.random((24, 24)) + 1
    y = 0.5 * x + 0.1 * rng.random((24, 24))
    stats = local_statistics(x, y, make_window())
    c1, c2, _ = MetricConfig().constants(1.0)
    direct = mssim(x, 1.7 * y, gamma=1.0).mssim
    assert scaled_ssim_objective(stats, 1.7, c1, c2) == pytest.approx(direct, abs=1e-12)


def test_scaled_objective_single_window():
    s = WindowStats(np.array(0.4), np.array(0.2), np.array(0.03), np.array(0.01), np.array(0.012))
    ref = scaled_objective(0.4, 0.2, 0.03, 0.01, 0.012, 2.0, 1e-4, 9e-4)
    assert scaled_ssim_objective(s, 2.0, 1e-4, 9e-4) == pytest.approx(ref, rel=1e-14)


images = arrays(np.float64, (14, 14), elements=st.floats(0, 1000, allow_nan=False))


@settings(max_examples=40, deadline=None)
@given(images, images)
def test_symmetric_and_bounded(x, y):
    a = mssim(x, y, gamma=1000.0).mssim
    b = mssim(y, x, gamma=1000.0).mssim
    assert a == pytest.approx(b, abs=1e-12)
    assert -1.0 - 1e-12 <= a <= 1.0 + 1e-12


@settings(max_examples=30, deadline=None)
@given(images, st.floats(0.1, 100))
def test_joint_rescaling_invariance(x, k):
    # scaling both images and the data range together leaves SSIM unchanged
    y = x[::-1].copy()
    a = mssim(x, y, gamma=1000.0).mssim
    b = mssim(k * x, k * y, gamma=1000.0 * k).mssim
    assert a == pytest.approx(b, abs=1e-9)
