"""Saturation diagnostics for SSIM components.

Every SSIM component has the form ``(a + c) / (b + c)``. When the
stabilizing constant ``c`` dwarfs ``a`` and ``b`` the component sits near 1
whatever the images look like. The saturation factor
``delta = min(|c / a|, |c / b|)`` measures that per window; larger means less
sensitive.
"""

from dataclasses import dataclass
import math

import numpy as np

from . import _kernels
from .calibration import preprocess
from .errors import InputError
from .ssim import MetricConfig, as_image, local_statistics

COMPONENTS = ("luminance", "contrast", "structure")
EPS = 1e-30


@dataclass(frozen=True)
class SaturationMaps:
    luminance: np.ndarray
    contrast: np.ndarray
    structure: np.ndarray
    clamped: dict

    def __getitem__(self, name):
        return getattr(self, name)


def _delta(a, b, c):
    aa = np.abs(a)
    bb = np.abs(b)
    clamped = int(np.count_nonzero((aa < EPS) | (bb < EPS)))
    np.maximum(aa, EPS, out=aa)
    np.maximum(bb, EPS, out=bb)
    c = abs(c)
    return np.minimum(c / aa, c / bb), clamped


def saturation_map(stats, c1, c2, c3=None):
    """Per-window saturation of luminance, contrast and structure.

    ``|a|`` and ``|b|`` are floored at ``EPS`` before dividing; each floored
    window is counted in ``clamped``.
    """
    if stats.size == 0:
        raise InputError("empty window statistics")
    if c3 is None:
        c3 = c2 / 2.0
    ux, uy = np.asarray(stats.ux, float), np.asarray(stats.uy, float)
    vx = np.maximum(np.asarray(stats.vx, float), 0.0)
    vy = np.maximum(np.asarray(stats.vy, float), 0.0)
    sxsy = np.sqrt(vx) * np.sqrt(vy)
    lum, n_lum = _delta(2.0 * ux * uy, ux * ux + uy * uy, c1)
    con, n_con = _delta(2.0 * sxsy, vx + vy, c2)
    st, n_st = _delta(np.asarray(stats.vxy, float), sxsy, c3)
    return SaturationMaps(lum, con, st, {"luminance": n_lum, "contrast": n_con, "structure": n_st})


@dataclass(frozen=True)
class ComponentSaturation:
    mean: float
    std: float
    clamped: int
    windows: int


@dataclass(frozen=True)
class SaturationReport:
    """Mean and (population) std over images of each image's mean delta."""

    luminance: ComponentSaturation
    contrast: ComponentSaturation
    structure: ComponentSaturation
    per_image: tuple

    def __getitem__(self, name):
        return getattr(self, name)

    def to_dict(self):
        out = {}
        for name in COMPONENTS:
            c = self[name]
            out[name] = {"mean": c.mean, "std": c.std, "clamped": c.clamped, "windows": c.windows}
        out["per_image"] = [dict(d) for d in self.per_image]
        return out


def _summarize(per_image, clamped, windows):
    parts = {}
    for name in COMPONENTS:
        values = np.array([d[name] for d in per_image])
        mean = math.fsum(values) / values.size
        std = math.sqrt(math.fsum((values - mean) ** 2) / values.size)
        parts[name] = ComponentSaturation(mean, std, clamped[name], windows)
    return SaturationReport(per_image=tuple(per_image), **parts)


def _report(pairs):
    """``pairs`` yields ``(x, y, gamma, config)``; builds the dataset report."""
    per_image = []
    clamped = dict.fromkeys(COMPONENTS, 0)
    windows = 0
    for x, y, gamma, config in pairs:
        stats = local_statistics(x, y, config.window, config.bias_corrected)
        c1, c2, c3 = config.constants(gamma)
        maps = saturation_map(stats, c1, c2, c3)
        per_image.append({name: _kernels.stable_mean(maps[name]) for name in COMPONENTS})
        for name in COMPONENTS:
            clamped[name] += maps.clamped[name]
        windows += stats.size
    if not per_image:
        raise InputError("empty dataset")
    return _summarize(per_image, clamped, windows)


def _check_sets(gt_set, pred_set):
    if len(gt_set) == 0:
        raise InputError("empty dataset")
    if len(gt_set) != len(pred_set):
        raise InputError(f"{len(gt_set)} reference images but {len(pred_set)} predictions")


def saturation_report(gt_set, pred_set, config=None, calibration=None):
    """Dataset saturation report.

    Without a calibration the raw pairs are used with ``config``'s range
    policy; with one, the MicroSSIM-preprocessed and alpha-scaled pairs are
    used with the calibration's constants.
    """
    _check_sets(gt_set, pred_set)
    if calibration is not None:
        calibration.require_fitted()
        config = calibration.metric_config()
    elif config is None:
        config = MetricConfig()

    def pairs():
        for gt, pred in zip(gt_set, pred_set):
            if calibration is not None:
                x, y = calibration.transform_gt(gt), calibration.transform_pred(pred)
            else:
                x, y = as_image(gt), as_image(pred)
            yield x, y, config.resolve_gamma(x), config

    return _report(pairs())


PIPELINE_VARIANTS = ("raw", "background_removed", "downscaled", "full")


def pipeline_saturation(gt_set, pred_set, calibration, raw_config=None, calibrated_config=None):
    """Saturation reports along the MicroSSIM pipeline.

    ``raw`` compares raw pairs under ``raw_config``'s range policy;
    ``background_removed`` subtracts the offsets but keeps the raw data
    range; ``downscaled`` also divides by the reference maximum and uses
    ``calibrated_config`` (default: the calibration's own constants);
    ``full`` adds the alpha scaling.
    """
    _check_sets(gt_set, pred_set)
    calibration.require_fitted()
    if raw_config is None:
        raw_config = MetricConfig(window=calibration.window(), k1=calibration.k1, k2=calibration.k2)
    cal_config = calibrated_config or calibration.metric_config()
    cal = calibration

    def variant(name):
        for gt, pred in zip(gt_set, pred_set):
            gt = as_image(gt)
            pred = as_image(pred)
            if name in ("raw", "background_removed"):
                gamma = raw_config.resolve_gamma(gt)
                if name == "raw":
                    yield gt, pred, gamma, raw_config
                else:
                    yield gt - cal.beta_gt, pred - cal.beta_pred, gamma, raw_config
            else:
                x = preprocess(gt, cal.beta_gt, cal.max_gt)
                y = preprocess(pred, cal.beta_pred, cal.max_gt)
                if name == "full":
                    y = cal.alpha * y
                yield x, y, cal_config.resolve_gamma(x), cal_config

    return {name: _report(variant(name)) for name in PIPELINE_VARIANTS}
