import numpy as np
import pytest

from micrometric import make_window, mssim
from micrometric.baselines import (
    affine_fit,
    care_ssim,
    care_transform,
    region_masks,
    region_means,
    vanilla_ssim,
    zscore_ssim,
    zscore_transform,
)
from micrometric.errors import InputError


@pytest.fixture
def pair():
    rng = np.random.default_rng(5)
    gt = rng.random((40, 40)) * 50 + 100
    return gt, rng


def test_zscore_invariant_to_affine(pair):
    gt, _ = pair
    assert zscore_ssim(gt, 3.0 * gt - 20.0) == pytest.approx(1.0, abs=1e-12)


def test_zscore_transform_moments(pair):
    gt, rng = pair
    x, y = zscore_transform(gt, rng.random(gt.shape))
    for z in (x, y):
        assert z.mean() == pytest.approx(0.0, abs=1e-12)
        assert z.std() == pytest.approx(1.0)


def test_zscore_constant_image():
    with pytest.raises(InputError, match="constant"):
        zscore_transform(np.ones((20, 20)), np.ones((20, 20)))


def test_affine_fit_recovers_parameters(pair):
    gt, _ = pair
    fit = affine_fit(gt, (gt - 7.0) / 2.5)
    assert fit.scale == pytest.approx(2.5)
    assert fit.offset == pytest.approx(7.0)
    assert fit.residual_mse == pytest.approx(0.0, abs=1e-18)


def test_affine_fit_matches_lstsq(pair):
    gt, rng = pair
    pred = rng.random(gt.shape)
    fit = affine_fit(gt, pred)
    A = np.column_stack([pred.ravel(), np.ones(pred.size)])
    (s, o), *_ = np.linalg.lstsq(A, gt.ravel(), rcond=None)
    assert fit.scale == pytest.approx(s)
    assert fit.offset == pytest.approx(o)


def test_care_undoes_affine(pair):
    gt, _ = pair
    score, fit = care_ssim(gt, 0.2 * gt + 3.0)
    assert score == pytest.approx(1.0, abs=1e-12)
    assert fit.scale == pytest.approx(5.0)


def test_care_zero_mean_variant(pair):
    gt, rng = pair
    pred = gt / 2 + rng.random(gt.shape)
    x, y, fit = care_transform(gt, pred, zero_mean=True)
    assert x.mean() == pytest.approx(0.0, abs=1e-10)
    assert y.mean() == pytest.approx(0.0, abs=1e-10)
    np.testing.assert_allclose(y, fit.scale * (pred - pred.mean()))


def test_care_degenerate():
    with pytest.raises(InputError):
        affine_fit(np.ones((20, 20)), np.full((20, 20), 3.0))


def test_vanilla_is_plain_mssim(pair):
    gt, rng = pair
    pred = gt + rng.random(gt.shape)
    assert vanilla_ssim(gt, pred) == mssim(gt, pred).mssim


def test_region_masks_partition_valid_region():
    img = np.zeros((40, 40))
    img[15:25, 15:25] = 100.0
    bg, fg = region_masks(img)
    assert bg.shape == (30, 30)
    assert not (bg & fg).any() and (bg | fg).all()
    assert fg[15, 15] and bg[0, 0]


def test_region_means():
    values = np.arange(4.0).reshape(2, 2)
    bg = np.array([[True, False], [False, False]])
    assert region_means(values, (bg, ~bg)) == (0.0, 2.0)
    assert region_means(values, (np.zeros((2, 2), bool),)) == (None,)


def test_region_masks_respect_window():
    img = np.zeros((30, 30))
    img[10:20, 10:20] = 1.0
    bg, _ = region_masks(img, config=None)
    bg7, _ = region_masks(img, config=type("C", (), {"window": make_window("uniform", 7)})())
    assert bg7.shape == (24, 24) and bg.shape == (20, 20)
