"""Multi-scale SSIM over a dyadic pyramid and its calibrated form, MicroMS3IM."""

from dataclasses import dataclass, field
import logging

import numpy as np

from . import _kernels
from .errors import InputError
from .ssim import MetricConfig, as_image, local_statistics

log = logging.getLogger(__name__)

DEFAULT_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
FLOOR = 1e-6


@dataclass(frozen=True)
class MsSsimConfig:
    base: MetricConfig = field(default_factory=MetricConfig)
    levels: int = 5
    level_weights: tuple = None

    def __post_init__(self):
        if self.levels < 1:
            raise InputError(f"levels must be positive, got {self.levels}")
        weights = self.level_weights
        if weights is None:
            if self.levels == len(DEFAULT_WEIGHTS):
                weights = DEFAULT_WEIGHTS
            else:
                weights = (1.0 / self.levels,) * self.levels
        weights = tuple(float(w) for w in weights)
        if len(weights) != self.levels:
            raise InputError(f"{len(weights)} level weights for {self.levels} levels")
        if any(w <= 0 for w in weights) or abs(sum(weights) - 1.0) > 1e-3:
            raise InputError(f"level weights must be positive and sum to 1 (within 1e-3), got {weights}")
        object.__setattr__(self, "level_weights", weights)


@dataclass(frozen=True)
class MsSsimResult:
    value: float
    level_values: tuple
    floored: int


def downsample(img):
    """2x2 average pooling; a trailing odd row or column is dropped."""
    img = as_image(img)
    h, w = img.shape
    if h < 2 or w < 2:
        raise InputError(f"cannot downsample an image of shape {img.shape}")
    h2, w2 = h // 2, w // 2
    blocks = img[:2 * h2, :2 * w2].reshape(h2, 2, w2, 2)
    return 0.25 * (blocks[:, 0, :, 0] + blocks[:, 0, :, 1] + blocks[:, 1, :, 0] + blocks[:, 1, :, 1])


def _check_pyramid(shape, levels, side):
    h, w = shape
    for j in range(levels):
        if min(h, w) < side:
            raise InputError(f"pyramid level {j} has shape {(h, w)}, smaller than the "
                             f"{side}x{side} window; use fewer levels or larger images")
        h, w = h // 2, w // 2


def ms_ssim_details(x, y, config=None, gamma=None):
    """MS-SSIM with per-level factors and the number of floored negative means.

    Levels before the last contribute the mean contrast-structure map, the
    last level contributes the mean full SSIM map (luminance included). A
    level mean below ``FLOOR`` is raised to ``FLOOR`` when its weight is not
    an integer, so a single level reduces exactly to mean SSIM.
    """
    if config is None:
        config = MsSsimConfig()
    base = config.base
    x = as_image(x, "x")
    y = as_image(y, "y")
    if x.shape != y.shape:
        raise InputError(f"image shapes differ: {x.shape} vs {y.shape}")
    _check_pyramid(x.shape, config.levels, base.window.side)
    if gamma is None:
        gamma = base.resolve_gamma(x)
    c1, c2, _ = base.constants(gamma)

    value = 1.0
    factors = []
    floored = 0
    for j, weight in enumerate(config.level_weights):
        s = local_statistics(x, y, base.window, base.bias_corrected)
        cs = (2.0 * s.vxy + c2) / (s.vx + s.vy + c2)
        if j == config.levels - 1:
            lum = (2.0 * s.ux * s.uy + c1) / (s.ux ** 2 + s.uy ** 2 + c1)
            m = _kernels.stable_mean(lum * cs)
        else:
            m = _kernels.stable_mean(cs)
            x, y = downsample(x), downsample(y)
        factors.append(m)
        if m < FLOOR and not float(weight).is_integer():
            floored += 1
            m = FLOOR
        value *= m ** weight
    if floored:
        log.debug("floored %d negative MS-SSIM level means", floored)
    return MsSsimResult(value, tuple(factors), floored)


def ms_ssim(x, y, config=None, gamma=None):
    """Multi-scale SSIM of ``y`` against the reference ``x``."""
    return ms_ssim_details(x, y, config, gamma).value


def micro_ms3im(gt, pred, calibration, config=None):
    """MS-SSIM on the calibrated operands used by MicroSSIM."""
    calibration.require_fitted()
    if config is None:
        config = MsSsimConfig(base=calibration.metric_config())
    x = calibration.transform_gt(gt)
    y = calibration.transform_pred(pred)
    return ms_ssim(x, y, config)
