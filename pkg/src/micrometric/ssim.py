"""Windowed SSIM with its luminance/contrast/structure decomposition.

Images are 2-D float arrays. All SSIM maps are computed in *valid* mode:
a value exists only where the window lies completely inside the image, so
an ``H x W`` image and a side-``s`` window give ``(H-s+1) x (W-s+1)`` maps.
"""

from dataclasses import dataclass, field
import math

import numpy as np

from . import _kernels
from .errors import InputError

__all__ = [
    "Window",
    "DataRange",
    "MetricConfig",
    "WindowStats",
    "SsimBreakdown",
    "as_image",
    "make_window",
    "local_statistics",
    "ssim_components",
    "mssim",
    "scaled_ssim_objective",
]


def as_image(img, name="image"):
    """Return ``img`` as a finite, 2-D float64 array."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InputError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise InputError(f"{name} contains NaN or Inf")
    return arr


@dataclass(frozen=True, eq=False)
class Window:
    """Normalized square window. ``profile`` is the 1-D factor of ``weights``."""

    kind: str
    side: int
    sigma: float | None
    profile: np.ndarray = field(repr=False)

    @property
    def weights(self):
        return np.outer(self.profile, self.profile)

    @property
    def size(self):
        return self.side * self.side

    def __eq__(self, other):
        if not isinstance(other, Window):
            return NotImplemented
        return (self.kind, self.side, self.sigma) == (other.kind, other.side, other.sigma)

    def __hash__(self):
        return hash((self.kind, self.side, self.sigma))


def make_window(kind="gaussian", side=11, sigma=None):
    """Build a gaussian or uniform SSIM window.

    Parameters
    ----------
    kind : {"gaussian", "uniform"}
    side : int
        Odd window side, at least 3.
    sigma : float, optional
        Gaussian width in pixels; defaults to 1.5 for gaussian windows.
    """
    if isinstance(side, bool) or int(side) != side or side < 3 or side % 2 == 0:
        raise InputError(f"window side must be an odd integer >= 3, got {side!r}")
    side = int(side)
    offsets = np.arange(side, dtype=np.float64) - side // 2
    if kind == "gaussian":
        if sigma is None:
            sigma = 1.5
        if not sigma > 0:
            raise InputError(f"gaussian sigma must be positive, got {sigma!r}")
        sigma = float(sigma)
        profile = np.exp(-(offsets ** 2) / (2.0 * sigma * sigma))
    elif kind == "uniform":
        if sigma is not None:
            raise InputError("uniform windows take no sigma")
        profile = np.ones(side)
    else:
        raise InputError(f"unknown window kind {kind!r}")
    profile = profile / profile.sum()
    profile.setflags(write=False)
    return Window(kind, side, sigma, profile)


@dataclass(frozen=True)
class DataRange:
    """Policy for the data range gamma behind the stabilizing constants.

    kinds: ``explicit`` (fixed value), ``gt_image`` (max - min of the
    reference image), ``gt_dataset`` (max - min of the pooled, preprocessed
    reference set; the value is filled in at calibration time), ``dtype``
    (``2**bit_depth - 1``) and ``auto`` (``gt_image`` for plain SSIM,
    ``gt_dataset`` when calibrating).
    """

    kind: str = "auto"
    value: float | None = None
    bit_depth: int | None = None

    def __post_init__(self):
        if self.kind not in ("explicit", "gt_image", "gt_dataset", "dtype", "auto"):
            raise InputError(f"unknown data range policy {self.kind!r}")
        if self.kind == "explicit" and not (self.value is not None and self.value > 0
                                            and math.isfinite(self.value)):
            raise InputError(f"explicit data range must be positive and finite, got {self.value!r}")
        if self.kind == "dtype" and (self.bit_depth is None or not 1 <= self.bit_depth <= 32):
            raise InputError(f"dtype data range needs a bit depth in [1, 32], got {self.bit_depth!r}")

    @classmethod
    def explicit(cls, value):
        return cls("explicit", value=float(value))

    @classmethod
    def gt_image(cls):
        return cls("gt_image")

    @classmethod
    def gt_dataset(cls, value=None):
        return cls("gt_dataset", value=None if value is None else float(value))

    @classmethod
    def dtype(cls, bit_depth):
        return cls("dtype", bit_depth=int(bit_depth))

    @classmethod
    def auto(cls):
        return cls("auto")

    def resolve(self, gt=None):
        """Return gamma, using ``gt`` for image-dependent policies."""
        if self.kind == "explicit":
            return self.value
        if self.kind == "dtype":
            return float(2 ** self.bit_depth - 1)
        if self.kind == "gt_dataset":
            if self.value is None:
                raise InputError("gt_dataset data range is unresolved; calibrate first")
            return self.value
        if gt is None:
            raise InputError(f"data range policy {self.kind!r} needs the reference image")
        gamma = float(np.max(gt) - np.min(gt))
        if not gamma > 0:
            raise InputError("reference image is constant; its data range is zero "
                             "(use an explicit data range)")
        return gamma


@dataclass(frozen=True)
class MetricConfig:
    """Window, stability constants and data-range policy for SSIM-family metrics.

    ``bias_corrected`` rescales (co)variances by ``K/(K-1)`` and is only
    defined for uniform windows.
    """

    window: Window = field(default_factory=make_window)
    k1: float = 0.01
    k2: float = 0.03
    data_range: DataRange = field(default_factory=DataRange.auto)
    bias_corrected: bool = False

    def __post_init__(self):
        if not (self.k1 > 0 and self.k2 > 0):
            raise InputError("k1 and k2 must be positive")
        if self.bias_corrected and self.window.kind != "uniform":
            raise InputError("bias-corrected variances need a uniform window")

    def constants(self, gamma):
        """``(c1, c2, c3)`` for data range ``gamma``, with ``c3 = c2 / 2``."""
        if not gamma > 0:
            raise InputError(f"data range must be positive, got {gamma!r}")
        c1 = (self.k1 * gamma) ** 2
        c2 = (self.k2 * gamma) ** 2
        return c1, c2, c2 / 2.0

    def resolve_gamma(self, gt=None):
        return self.data_range.resolve(gt)


@dataclass(frozen=True)
class WindowStats:
    """Local means, variances and covariance; scalars or same-shape arrays."""

    ux: np.ndarray
    uy: np.ndarray
    vx: np.ndarray
    vy: np.ndarray
    vxy: np.ndarray

    @property
    def size(self):
        return int(np.size(self.ux))

    def ravel(self, dtype=None):
        parts = (np.ravel(a) if dtype is None else np.ravel(a).astype(dtype, copy=False)
                 for a in (self.ux, self.uy, self.vx, self.vy, self.vxy))
        return WindowStats(*(np.ascontiguousarray(p) for p in parts))

    def scaled(self, alpha):
        """Stats of the pair ``(x, alpha * y)``."""
        return WindowStats(self.ux, alpha * self.uy, self.vx, alpha * alpha * self.vy,
                           alpha * self.vxy)

    @classmethod
    def concatenate(cls, items, dtype=None):
        items = [s.ravel(dtype) for s in items]
        if not items:
            raise InputError("no window statistics given")
        if len(items) == 1:
            return items[0]
        return cls(*(np.concatenate([getattr(s, f) for s in items])
                     for f in ("ux", "uy", "vx", "vy", "vxy")))


@dataclass(frozen=True)
class SsimBreakdown:
    luminance_map: np.ndarray
    contrast_map: np.ndarray
    structure_map: np.ndarray
    ssim_map: np.ndarray
    mssim: float
    gamma: float

    @property
    def valid_height(self):
        return self.ssim_map.shape[0]

    @property
    def valid_width(self):
        return self.ssim_map.shape[1]

    def component_means(self):
        return {
            "luminance": _kernels.stable_mean(self.luminance_map),
            "contrast": _kernels.stable_mean(self.contrast_map),
            "structure": _kernels.stable_mean(self.structure_map),
        }


def _check_pair(x, y, window):
    x = as_image(x, "x")
    y = as_image(y, "y")
    if x.shape != y.shape:
        raise InputError(f"image shapes differ: {x.shape} vs {y.shape}")
    if min(x.shape) < window.side:
        raise InputError(f"image of shape {x.shape} is smaller than the "
                         f"{window.side}x{window.side} window")
    return x, y


def local_statistics(x, y, window, bias_corrected=False):
    """Weighted local statistics of ``x`` and ``y`` over every valid window position.

    Variances use the weighted second moment ``sum(w z^2) - (sum(w z))^2``
    and are clamped at zero. Each image is centred on its global mean first,
    which leaves the (co)variances unchanged but avoids cancellation for
    images sitting on a large offset.
    """
    x, y = _check_pair(x, y, window)
    mx = float(np.mean(x))
    my = float(np.mean(y))
    xc = x - mx
    yc = y - my
    ux, uy, vx, vy, vxy = _kernels.window_moments(xc, yc, window.profile)
    if bias_corrected:
        if window.kind != "uniform":
            raise InputError("bias-corrected variances need a uniform window")
        k = window.size / (window.size - 1.0)
        vx *= k
        vy *= k
        vxy *= k
    ux += mx
    uy += my
    return WindowStats(ux, uy, vx, vy, vxy)


def ssim_components(stats, c1, c2, c3=None):
    """Luminance, contrast and structure terms for the given window statistics."""
    if c3 is None:
        c3 = c2 / 2.0
    sx = np.sqrt(np.maximum(stats.vx, 0.0))
    sy = np.sqrt(np.maximum(stats.vy, 0.0))
    lum = (2.0 * stats.ux * stats.uy + c1) / (stats.ux ** 2 + stats.uy ** 2 + c1)
    con = (2.0 * sx * sy + c2) / (stats.vx + stats.vy + c2)
    st = (stats.vxy + c3) / (sx * sy + c3)
    return lum, con, st


def _ssim_map(stats, c1, c2):
    lum = (2.0 * stats.ux * stats.uy + c1) / (stats.ux ** 2 + stats.uy ** 2 + c1)
    cs = (2.0 * stats.vxy + c2) / (stats.vx + stats.vy + c2)
    return lum * cs


def mssim(x, y, config=None, gamma=None):
    """Mean SSIM of ``y`` against the reference ``x``.

    ``gamma`` overrides the config's data-range policy when given.
    Returns an :class:`SsimBreakdown` holding all component maps.
    """
    if config is None:
        config = MetricConfig()
    stats = local_statistics(x, y, config.window, config.bias_corrected)
    if gamma is None:
        gamma = config.resolve_gamma(np.asarray(x, dtype=np.float64))
    c1, c2, c3 = config.constants(gamma)
    lum, con, st = ssim_components(stats, c1, c2, c3)
    ssim_map = _ssim_map(stats, c1, c2)
    return SsimBreakdown(lum, con, st, ssim_map, _kernels.stable_mean(ssim_map), float(gamma))


def scaled_ssim_objective(stats, alpha, c1, c2):
    """Mean over windows of SSIM(x, alpha * y), computed from ``(x, y)`` statistics.

    ``stats`` is a :class:`WindowStats` or a sequence of them (pooled).
    """
    if not alpha > 0:
        raise InputError(f"alpha must be positive, got {alpha!r}")
    flat = _pool(stats)
    value, _ = _kernels.objective_sums(flat.ux, flat.uy, flat.vx, flat.vy, flat.vxy,
                                       alpha, c1, c2)
    return value / flat.size


def _pool(stats):
    if isinstance(stats, WindowStats):
        flat = stats.ravel()
    else:
        flat = WindowStats.concatenate(list(stats))
    if flat.size == 0:
        raise InputError("empty set of window statistics")
    return flat
