"""Seeded synthetic micrograph pairs with known offsets and intensity scale.

A pair shares one clean signal, a sum of isotropic Gaussian blobs. The
high-SNR reference is ``beta_gt + signal`` (plus optional Gaussian noise);
the low-SNR image is ``beta_pred + noisy(signal / scale)`` where the noise
is gain-scaled Poisson shot noise plus Gaussian read noise, so its
expectation is exactly ``beta_pred + signal / scale``.

Random numbers come from NumPy's PCG64 bit generator; draws happen in a
fixed order (blob centres, amplitudes, widths, reference noise, shot
noise, read noise), so a seed fully determines the output.
"""

from dataclasses import asdict, dataclass, replace
import math

import numpy as np

from .errors import InputError

RNG_NAME = "numpy.random.PCG64"
# blobs are rendered out to this many standard deviations
BLOB_TRUNCATION = 6.0


@dataclass(frozen=True)
class SynthParams:
    height: int = 256
    width: int = 256
    n_blobs: int = 20
    amplitude_range: tuple = (200.0, 1000.0)
    sigma_range: tuple = (2.0, 6.0)
    beta_gt: float = 100.0
    beta_pred: float = 110.0
    scale: float = 5.0
    poisson_gain: float = 1.0
    read_noise_sigma: float = 2.0
    gt_noise_sigma: float = 0.0
    quantize: bool = False
    seed: int = 0

    def validate(self):
        if self.height < 1 or self.width < 1:
            raise InputError(f"image size must be positive, got {self.height}x{self.width}")
        if self.n_blobs < 0:
            raise InputError("n_blobs must be non-negative")
        lo, hi = self.amplitude_range
        if not 0 <= lo <= hi:
            raise InputError(f"amplitude range must satisfy 0 <= low <= high, got {self.amplitude_range}")
        lo, hi = self.sigma_range
        if not 0 < lo <= hi:
            raise InputError(f"sigma range must satisfy 0 < low <= high, got {self.sigma_range}")
        if not self.scale > 0:
            raise InputError(f"scale must be positive, got {self.scale}")
        if self.poisson_gain < 0 or self.read_noise_sigma < 0 or self.gt_noise_sigma < 0:
            raise InputError("noise parameters must be non-negative")
        if not 0 <= self.seed < 2 ** 64:
            raise InputError("seed must be a 64-bit unsigned integer")


def render_blobs(height, width, centers, amplitudes, sigmas):
    """Sum of isotropic Gaussian bumps, each truncated at ``BLOB_TRUNCATION`` sigmas."""
    out = np.zeros((height, width))
    rows = np.arange(height, dtype=np.float64)
    cols = np.arange(width, dtype=np.float64)
    for (cy, cx), amp, sig in zip(centers, amplitudes, sigmas):
        r = BLOB_TRUNCATION * sig
        r0, r1 = max(int(math.floor(cy - r)), 0), min(int(math.ceil(cy + r)) + 1, height)
        c0, c1 = max(int(math.floor(cx - r)), 0), min(int(math.ceil(cx + r)) + 1, width)
        if r0 >= r1 or c0 >= c1:
            continue
        gy = np.exp(-((rows[r0:r1] - cy) ** 2) / (2 * sig * sig))
        gx = np.exp(-((cols[c0:c1] - cx) ** 2) / (2 * sig * sig))
        out[r0:r1, c0:c1] += amp * np.outer(gy, gx)
    return out


def _draw_signal(params, rng):
    h, w = params.height, params.width
    centers = rng.uniform((0.0, 0.0), (h, w), size=(params.n_blobs, 2))
    amplitudes = rng.uniform(*params.amplitude_range, size=params.n_blobs)
    sigmas = rng.uniform(*params.sigma_range, size=params.n_blobs)
    return render_blobs(h, w, centers, amplitudes, sigmas)


def clean_signal(params):
    """The noise-free blob signal shared by the pair generated from ``params``."""
    params.validate()
    return _draw_signal(params, np.random.Generator(np.random.PCG64(params.seed)))


def generate_pair(params):
    """Return ``(gt, low, metadata)`` for ``params``."""
    params.validate()
    rng = np.random.Generator(np.random.PCG64(params.seed))
    h, w = params.height, params.width
    signal = _draw_signal(params, rng)

    gt = params.beta_gt + signal
    if params.gt_noise_sigma > 0:
        gt = gt + rng.normal(0.0, params.gt_noise_sigma, size=(h, w))

    expected = signal / params.scale
    if params.poisson_gain > 0:
        shot = params.poisson_gain * rng.poisson(expected / params.poisson_gain)
    else:
        shot = expected
    low = params.beta_pred + shot
    if params.read_noise_sigma > 0:
        low = low + rng.normal(0.0, params.read_noise_sigma, size=(h, w))

    if params.quantize:
        gt = np.rint(gt)
        low = np.rint(low)
    peak = float(signal.max()) if signal.size else 0.0
    meta = {
        "rng": RNG_NAME,
        "seed": params.seed,
        "beta_gt": params.beta_gt,
        "beta_pred": params.beta_pred,
        "scale": params.scale,
        "signal_peak": peak,
        "gt_max": float(gt.max()),
        "gt_sum": math.fsum(gt.ravel()),
        "low_sum": math.fsum(low.ravel()),
        "foreground_fraction": float(np.mean(signal > 1e-3 * peak)) if peak > 0 else 0.0,
    }
    return gt, low, meta


def generate_dataset(params, n_pairs):
    """``n_pairs`` pairs with seeds ``params.seed, params.seed + 1, ...``."""
    if n_pairs < 0:
        raise InputError("n_pairs must be non-negative")
    return [generate_pair(replace(params, seed=params.seed + i)) for i in range(n_pairs)]


def generate_uniform_noise(height, width, low=0.0, high=1.0, seed=0):
    """I.i.d. uniform noise image on ``[low, high)``."""
    if not low < high:
        raise InputError(f"need low < high, got {low} and {high}")
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.uniform(low, high, size=(height, width))


def params_dict(params):
    out = asdict(params)
    out["amplitude_range"] = list(params.amplitude_range)
    out["sigma_range"] = list(params.sigma_range)
    return out
