"""Reference metrics MicroSSIM is compared against.

Each baseline is a pre-transformation of the pair followed by the shared
:func:`~micrometric.ssim.mssim` kernel; the ``*_transform`` helpers expose
the transformed operands so callers can inspect the full SSIM breakdown.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .calibration import nearest_rank_index
from .errors import InputError
from .ssim import MetricConfig, as_image, local_statistics, mssim


@dataclass(frozen=True)
class AffineFit:
    scale: float
    offset: float
    residual_mse: float


def vanilla_ssim(gt, pred, config=None):
    """Plain mean SSIM on the unnormalized images."""
    return mssim(gt, pred, config).mssim


def zscore_transform(gt, pred):
    """Standardize each image by its own mean and standard deviation."""
    out = []
    for name, img in (("reference", gt), ("prediction", pred)):
        img = as_image(img, name)
        std = float(np.std(img))
        if not std > 0:
            raise InputError(f"{name} image is constant; cannot standardize it")
        out.append((img - float(np.mean(img))) / std)
    return tuple(out)


def zscore_ssim(gt, pred, config=None):
    """Mean SSIM after standardizing both images; gamma comes from the standardized reference."""
    x, y = zscore_transform(gt, pred)
    return mssim(x, y, config).mssim


def affine_fit(gt, pred):
    """Least-squares ``scale * pred + offset`` against ``gt``."""
    g = as_image(gt, "reference").ravel()
    p = as_image(pred, "prediction").ravel()
    if g.size != p.size:
        raise InputError("reference and prediction differ in size")
    pc = p - p.mean()
    gc = g - g.mean()
    spp = float(np.dot(pc, pc))
    if not spp > 0:
        raise InputError("prediction is constant; the affine fit is degenerate")
    scale = float(np.dot(pc, gc)) / spp
    offset = float(g.mean()) - scale * float(p.mean())
    resid = g - (scale * p + offset)
    return AffineFit(scale, offset, float(np.dot(resid, resid)) / g.size)


def care_transform(gt, pred, zero_mean=False):
    """Per-pair least-squares rescaling of the prediction.

    With ``zero_mean`` both images are mean-centred and only the scale is
    applied, the variant used by later denoising work.
    """
    gt = as_image(gt, "reference")
    pred = as_image(pred, "prediction")
    fit = affine_fit(gt, pred)
    if zero_mean:
        return gt - float(gt.mean()), fit.scale * (pred - float(pred.mean())), fit
    return gt, fit.scale * pred + fit.offset, fit


def care_ssim(gt, pred, config=None, zero_mean=False):
    """CARE-style SSIM; returns ``(score, AffineFit)``."""
    x, y, fit = care_transform(gt, pred, zero_mean)
    return mssim(x, y, config).mssim, fit


def region_masks(gt, config=None, threshold=0.02, percentile=3.0):
    """Background/foreground masks over the valid SSIM region of ``gt``.

    A window is foreground when the reference's local mean exceeds
    ``p + threshold * (max - p)``, ``p`` being the reference's own
    ``percentile`` value.
    """
    if config is None:
        config = MetricConfig()
    gt = as_image(gt, "reference")
    flat = np.sort(gt.ravel())
    p = float(flat[nearest_rank_index(flat.size, percentile)])
    level = p + threshold * (float(flat[-1]) - p)
    local_mean = local_statistics(gt, gt, config.window).ux
    fg = local_mean > level
    return ~fg, fg


def region_means(values, masks):
    """Mean of a valid-region map over each mask; None for an empty mask."""
    out = []
    for mask in masks:
        n = int(np.count_nonzero(mask))
        out.append(_kernels.stable_sum(np.where(mask, values, 0.0)) / n if n else None)
    return tuple(out)

