"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class MicrometricError(Exception):
    """Base class for all library errors."""


class InputError(MicrometricError, ValueError):
    """Malformed input: bad arguments, files or manifests (CLI exit code 2)."""


class FormatUnsupportedError(InputError):
    """An image file uses a feature outside the supported codec subset."""


class ManifestError(InputError):
    """A pairing manifest could not be parsed or validated."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NumericError(MicrometricError, ArithmeticError):
    """A computation produced non-finite values or failed to converge (exit code 3)."""


class UndefinedClosedFormError(NumericError, ValueError):
    """The closed-form scale factor needs positive means, variances and covariance."""


class CalibrationStateError(MicrometricError, RuntimeError):
    """A calibration was used before being fitted."""
