"""Dataset-level calibration for MicroSSIM.

A calibration holds four numbers learned once per dataset: the background
offsets of the reference and prediction sets, the reference maximum used for
downscaling, and the scale factor ``alpha`` applied to every preprocessed
prediction. ``micro_ssim`` then compares
``(gt - beta_gt) / max_gt`` with ``alpha * (pred - beta_pred) / max_gt``.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
import hashlib
import logging
import math

import numpy as np
from scipy import optimize

from . import __version__, _kernels
from .errors import CalibrationStateError, InputError, NumericError, UndefinedClosedFormError
from .ssim import (
    DataRange,
    MetricConfig,
    WindowStats,
    _pool,
    as_image,
    local_statistics,
    make_window,
    mssim,
)

log = logging.getLogger(__name__)

DEFAULT_PERCENTILE = 3.0
DEFAULT_BOUNDS = (1e-3, 1e3)
WIDEST_BOUNDS = (1e-6, 1e6)
# stats beyond this many bytes in float64 are stored as float32
STATS_FLOAT64_BUDGET = 1 << 30


def nearest_rank_index(n, percentile):
    """Index into a sorted pool of ``n`` values for ``percentile``.

    Rounds ``percentile/100 * (n-1)`` to the nearest integer, taking the
    lower rank on exact halves. Exact rational arithmetic keeps the tie
    rule independent of floating-point rounding.
    """
    if n < 1:
        raise InputError("cannot take a percentile of an empty pool")
    if not 0 <= percentile <= 100:
        raise InputError(f"percentile must lie in [0, 100], got {percentile!r}")
    q = Fraction(percentile) * (n - 1) / 100
    return math.ceil(q - Fraction(1, 2))


def _select(pool, percentile):
    # pool is a scratch buffer and gets reordered
    k = nearest_rank_index(pool.size, percentile)
    pool.partition(k)
    return float(pool[k])


def _pool_pixels(images, name):
    arrays = [as_image(img, name) for img in images]
    if not arrays:
        raise InputError(f"empty {name} collection")
    shapes = [a.shape for a in arrays]
    return np.concatenate([a.ravel() for a in arrays]), shapes


def estimate_offset(images, percentile=DEFAULT_PERCENTILE):
    """Exact nearest-rank percentile of all pixels pooled across ``images``."""
    if isinstance(images, np.ndarray) and images.ndim == 2:
        images = [images]
    pool, _ = _pool_pixels(images, "image")
    return _select(pool, percentile)


def estimate_max(gt_images):
    """Largest pixel value across all reference images."""
    if isinstance(gt_images, np.ndarray) and gt_images.ndim == 2:
        gt_images = [gt_images]
    maxima = [float(np.max(as_image(img, "reference image"))) for img in gt_images]
    if not maxima:
        raise InputError("empty reference collection")
    return max(maxima)


def preprocess(img, offset, scale):
    """Per-pixel ``(img - offset) / scale``."""
    if not scale > 0:
        raise InputError(f"scale must be positive, got {scale!r}")
    return (as_image(img) - offset) / scale


def closed_form_alpha(stats):
    """Maximizer of SSIM(x, alpha*y) when both stabilizing constants vanish.

    Defined only for positive means, variances and covariance.
    """
    ux, uy, vx, vy, vxy = (float(v) for v in (stats.ux, stats.uy, stats.vx, stats.vy, stats.vxy))
    if not (ux > 0 and uy > 0 and vx > 0 and vy > 0 and vxy > 0):
        raise UndefinedClosedFormError(
            "closed-form alpha needs positive means, variances and covariance, got "
            f"ux={ux}, uy={uy}, vx={vx}, vy={vy}, vxy={vxy}")
    return math.sqrt((math.sqrt(vx) * ux) / (math.sqrt(vy) * uy))


def ssim_alpha_derivative(stats, alpha, c1, c2):
    """d/dalpha of SSIM(x, alpha*y); averaged over windows for array stats."""
    if not alpha > 0:
        raise InputError(f"alpha must be positive, got {alpha!r}")
    flat = _pool(stats)
    _, deriv = _kernels.objective_sums(flat.ux, flat.uy, flat.vx, flat.vy, flat.vxy,
                                       alpha, c1, c2)
    return deriv / flat.size


@dataclass(frozen=True)
class FitReport:
    alpha: float
    objective_at_alpha: float
    closed_form_seed: float
    iterations: int
    bracket: tuple
    derivative_at_alpha: float
    objective_neighbors: tuple
    boundary: bool = False
    warning: str | None = None

    @property
    def certified(self):
        """Local-maximum certificate against alpha * (1 +- 1%)."""
        return all(self.objective_at_alpha >= v for v in self.objective_neighbors)


class _Objective:
    """Mean objective and derivative over pooled stats, memoized per alpha."""

    def __init__(self, flat, c1, c2):
        self.flat = flat
        self.c1 = c1
        self.c2 = c2
        self.evaluations = 0
        self._cache = {}

    def both(self, alpha):
        alpha = float(alpha)
        hit = self._cache.get(alpha)
        if hit is not None:
            return hit
        self.evaluations += 1
        f = self.flat
        value, deriv = _kernels.objective_sums(f.ux, f.uy, f.vx, f.vy, f.vxy, alpha,
                                               self.c1, self.c2)
        value /= f.size
        deriv /= f.size
        if not (math.isfinite(value) and math.isfinite(deriv)):
            raise NumericError(f"objective is not finite at alpha={alpha!r}")
        self._cache[alpha] = (value, deriv)
        return value, deriv

    def __call__(self, alpha):
        return self.both(alpha)[0]

    def derivative(self, alpha):
        return self.both(alpha)[1]


def _median_seed(flat):
    values = _kernels.closed_form_values(flat.ux, flat.uy, flat.vx, flat.vy, flat.vxy)
    n = values.size
    if n == 0:
        return None
    k = n // 2
    if n % 2:
        values.partition(k)
        return float(values[k])
    values.partition((k - 1, k))
    return 0.5 * (float(values[k - 1]) + float(values[k]))


def fit_alpha(stats, c1, c2, bounds=DEFAULT_BOUNDS, rtol=1e-6):
    """Find the alpha maximizing the mean of SSIM(x, alpha*y) over all windows.

    The search starts from the median per-window closed-form value and
    walks geometrically in the uphill direction of the analytic derivative
    until its sign flips. Brent's root finder then locates the derivative
    zero inside that bracket to machine precision. The objective is checked
    at ``alpha * (1 +- 1%)`` to certify a local maximum.
    """
    low, high = (float(b) for b in bounds)
    if not 0 < low < high:
        raise InputError(f"bounds must satisfy 0 < low < high, got {bounds!r}")
    flat = _pool(stats)
    f = _Objective(flat, c1, c2)

    seed = _median_seed(flat)
    if seed is None:
        log.info("no window satisfies the closed-form preconditions; seeding at 1")
        seed = 1.0
    while seed < low and low > WIDEST_BOUNDS[0]:
        low = max(low / 10.0, WIDEST_BOUNDS[0])
    while seed > high and high < WIDEST_BOUNDS[1]:
        high = min(high * 10.0, WIDEST_BOUNDS[1])

    start = min(max(seed, low), high)
    g0 = f.derivative(start)
    a = c = start
    step = 2.0
    if g0 > 0:
        while f.derivative(c) > 0 and c < high:
            a, c = c, min(c * step, high)
            step *= 1.5
    elif g0 < 0:
        while f.derivative(a) < 0 and a > low:
            c, a = a, max(a / step, low)
            step *= 1.5

    if f.derivative(a) > 0 > f.derivative(c):
        alpha = optimize.brentq(f.derivative, a, c, xtol=1e-300,
                                rtol=4 * np.finfo(float).eps, maxiter=200)
    elif g0 == 0:
        alpha = start
    else:
        # the derivative kept its sign up to a bound
        alpha = a if f.derivative(a) <= 0 else c

    span = rtol * alpha
    boundary = alpha - low <= span or high - alpha <= span
    warning = None
    if boundary:
        warning = f"no interior maximum in [{low:g}, {high:g}]; alpha={alpha:g} lies on the boundary"
        log.warning(warning)
    value, deriv = f.both(alpha)
    neighbors = (f(alpha * 0.99), f(alpha * 1.01))
    return FitReport(alpha=alpha, objective_at_alpha=value, closed_form_seed=seed,
                     iterations=f.evaluations, bracket=(a, c), derivative_at_alpha=deriv,
                     objective_neighbors=neighbors, boundary=boundary, warning=warning)


_SERIAL_KEYS = ("beta_gt", "beta_pred", "max_gt", "alpha", "percentile", "k1", "k2",
                "window_kind", "window_side", "sigma", "data_range", "tool_version",
                "input_digest")
_FLOAT_KEYS = {"beta_gt", "beta_pred", "max_gt", "alpha", "percentile", "k1", "k2",
               "sigma", "data_range"}
_HEADER = "# micrometric calibration"


@dataclass(frozen=True)
class DatasetCalibration:
    """Learned dataset-level transform. ``alpha is None`` means not fitted yet.

    ``data_range`` is the resolved gamma for the preprocessed images; when
    it is None the reference image's own range is used per pair.
    """

    beta_gt: float
    beta_pred: float
    max_gt: float
    alpha: float | None = None
    percentile: float = DEFAULT_PERCENTILE
    k1: float = 0.01
    k2: float = 0.03
    window_kind: str = "gaussian"
    window_side: int = 11
    sigma: float | None = 1.5
    data_range: float | None = None
    tool_version: str = __version__
    input_digest: str = ""
    fit: FitReport | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not self.max_gt > self.beta_gt:
            raise InputError(f"max_gt ({self.max_gt}) must exceed beta_gt ({self.beta_gt})")
        if not self.max_gt > 0:
            raise InputError(f"max_gt must be positive, got {self.max_gt}")
        if self.alpha is not None and not self.alpha > 0:
            raise InputError(f"alpha must be positive, got {self.alpha}")

    @property
    def fitted(self):
        return self.alpha is not None

    def window(self):
        return make_window(self.window_kind, self.window_side,
                           self.sigma if self.window_kind == "gaussian" else None)

    def metric_config(self):
        policy = DataRange.gt_image() if self.data_range is None else DataRange.explicit(self.data_range)
        return MetricConfig(window=self.window(), k1=self.k1, k2=self.k2, data_range=policy)

    def require_fitted(self):
        if not self.fitted:
            raise CalibrationStateError("calibration has not been fitted")

    def transform_gt(self, gt):
        return preprocess(gt, self.beta_gt, self.max_gt)

    def transform_pred(self, pred):
        self.require_fitted()
        return self.alpha * preprocess(pred, self.beta_pred, self.max_gt)

    def to_text(self):
        self.require_fitted()
        lines = [_HEADER]
        for key in _SERIAL_KEYS:
            value = getattr(self, key)
            if value is None:
                text = "none"
            elif key in _FLOAT_KEYS:
                text = repr(float(value))
            else:
                text = str(value)
            lines.append(f"{key}={text}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        values = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep or key not in _SERIAL_KEYS:
                raise InputError(f"calibration line {n}: unrecognized entry {raw!r}")
            if key in values:
                raise InputError(f"calibration line {n}: duplicate key {key!r}")
            values[key] = value.strip()
        missing = [k for k in _SERIAL_KEYS if k not in values]
        if missing:
            raise InputError(f"calibration is missing keys: {', '.join(missing)}")
        kwargs = {}
        try:
            for key, value in values.items():
                if value == "none":
                    kwargs[key] = None
                elif key in _FLOAT_KEYS:
                    kwargs[key] = float(value)
                elif key == "window_side":
                    kwargs[key] = int(value)
                else:
                    kwargs[key] = value
        except ValueError as exc:
            raise InputError(f"calibration value could not be parsed: {exc}") from None
        return cls(**kwargs)

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    @property
    def digest(self):
        """Short content hash of the serialized calibration."""
        return hashlib.blake2b(self.to_text().encode(), digest_size=8).hexdigest()


def _resolve_calibration_gamma(config, max_gt, min_gt):
    policy = config.data_range
    if policy.kind in ("auto", "gt_dataset"):
        if policy.value is not None:
            return policy.value
        return (max_gt - min_gt) / max_gt
    if policy.kind == "gt_image":
        raise InputError("a per-image data range cannot drive a dataset-level fit; "
                         "use gt_dataset, explicit or dtype")
    return policy.resolve()


def _le_bytes(arr):
    if arr.dtype.byteorder == ">" or (arr.dtype.byteorder == "=" and np.little_endian is False):
        arr = arr.astype("<f8")
    return memoryview(np.ascontiguousarray(arr)).cast("B")


def _stats_dtype(choice, n_windows):
    if choice == "auto":
        return np.float64 if n_windows * 5 * 8 <= STATS_FLOAT64_BUDGET else np.float32
    return np.dtype(choice).type


def collect_window_stats(gt_set, pred_set, beta_gt, beta_pred, max_gt, window,
                         dtype="auto", threads=1, shapes=None):
    """Window statistics of every preprocessed pair, pooled into flat arrays.

    Pairs are processed concurrently but each writes its own slice, so the
    pooled order is always the input order.
    """
    n = len(gt_set)
    if n != len(pred_set):
        raise InputError(f"{n} reference images but {len(pred_set)} predictions")
    if shapes is None:
        shapes = [as_image(g).shape for g in gt_set]
    side = window.side
    counts = [max(h - side + 1, 0) * max(w - side + 1, 0) for h, w in shapes]
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    total = int(offsets[-1])
    dtype = _stats_dtype(dtype, total)
    arrays = [np.empty(total, dtype=dtype) for _ in range(5)]

    def work(i):
        gt = preprocess(gt_set[i], beta_gt, max_gt)
        pred = preprocess(pred_set[i], beta_pred, max_gt)
        if gt.shape != pred.shape:
            raise InputError(f"pair {i}: shapes differ {gt.shape} vs {pred.shape}")
        s = local_statistics(gt, pred, window)
        lo, hi = offsets[i], offsets[i + 1]
        for dst, src in zip(arrays, (s.ux, s.uy, s.vx, s.vy, s.vxy)):
            dst[lo:hi] = src.ravel()

    if threads > 1 and n > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, range(n)))
    else:
        for i in range(n):
            work(i)
    return WindowStats(*arrays)


def calibrate(gt_set, pred_set, config=None, percentile=DEFAULT_PERCENTILE, *,
              bounds=DEFAULT_BOUNDS, stats_dtype="auto", threads=1):
    """Fit offsets, downscale factor and alpha on a whole dataset.

    ``gt_set`` and ``pred_set`` are equal-length sequences of 2-D images
    (any sequence supporting ``len`` and indexing, so lazily loaded files
    work). Window statistics are stored as float32 once they would exceed
    ``STATS_FLOAT64_BUDGET`` in float64, unless ``stats_dtype`` says otherwise.
    """
    if config is None:
        config = MetricConfig()
    if len(gt_set) == 0:
        raise InputError("empty dataset")
    if len(gt_set) != len(pred_set):
        raise InputError(f"{len(gt_set)} reference images but {len(pred_set)} predictions")

    digest = hashlib.sha256()
    digest.update(repr(float(percentile)).encode())

    pool, shapes = _pool_pixels(gt_set, "reference image")
    digest.update(_le_bytes(pool))
    max_gt, min_gt = float(pool.max()), float(pool.min())
    beta_gt = _select(pool, percentile)
    del pool

    pool, pred_shapes = _pool_pixels(pred_set, "prediction")
    if pred_shapes != shapes:
        raise InputError("reference and prediction images differ in shape")
    digest.update(_le_bytes(pool))
    beta_pred = _select(pool, percentile)
    del pool

    if not max_gt > beta_gt or not max_gt > 0:
        raise InputError(f"reference maximum {max_gt} must be positive and exceed the "
                         f"offset {beta_gt}")
    gamma = _resolve_calibration_gamma(config, max_gt, min_gt)
    c1, c2, _ = config.constants(gamma)

    stats = collect_window_stats(gt_set, pred_set, beta_gt, beta_pred, max_gt, config.window,
                                 dtype=stats_dtype, threads=threads, shapes=shapes)
    if stats.size == 0:
        raise InputError("images are smaller than the window")
    report = fit_alpha(stats, c1, c2, bounds)
    log.info("calibrated: beta_gt=%g beta_pred=%g max_gt=%g alpha=%g (%d evaluations)",
             beta_gt, beta_pred, max_gt, report.alpha, report.iterations)
    w = config.window
    return DatasetCalibration(beta_gt=beta_gt, beta_pred=beta_pred, max_gt=max_gt,
                              alpha=report.alpha, percentile=float(percentile), k1=config.k1,
                              k2=config.k2, window_kind=w.kind, window_side=w.side,
                              sigma=w.sigma, data_range=gamma, input_digest=digest.hexdigest()[:32],
                              fit=report)


def micro_ssim(gt, pred, calibration, config=None):
    """MicroSSIM of ``pred`` against ``gt`` under a fitted dataset calibration."""
    calibration.require_fitted()
    if config is None:
        config = calibration.metric_config()
    x = calibration.transform_gt(gt)
    y = calibration.transform_pred(pred)
    return mssim(x, y, config)
