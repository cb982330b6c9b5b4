"""SSIM-family image quality metrics calibrated for microscopy data."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    CalibrationStateError,
    FormatUnsupportedError,
    InputError,
    ManifestError,
    MicrometricError,
    NumericError,
    UndefinedClosedFormError,
)
from .ssim import (  # noqa: E402
    DataRange,
    MetricConfig,
    SsimBreakdown,
    Window,
    WindowStats,
    local_statistics,
    make_window,
    mssim,
    scaled_ssim_objective,
    ssim_components,
)
from .calibration import (  # noqa: E402
    DatasetCalibration,
    FitReport,
    calibrate,
    closed_form_alpha,
    estimate_max,
    estimate_offset,
    fit_alpha,
    micro_ssim,
    preprocess,
    ssim_alpha_derivative,
)
