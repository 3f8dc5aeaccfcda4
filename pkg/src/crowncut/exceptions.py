"""Exception hierarchy.

Every error raised on bad *data* derives from :class:`CrowncutError`; the CLI
maps those to exit code 2. Misuse of the API (wrong types, invalid
hyper-parameters) raises plain ``ValueError``/``TypeError`` subclasses too, so
sklearn-style callers can catch what they already expect.
"""


class CrowncutError(Exception):
    """Base class for all package errors."""


# -- imaging-core -----------------------------------------------------------


class MissingFile(CrowncutError, FileNotFoundError):
    pass


class MalformedRaster(CrowncutError, ValueError):
    pass


class UnsupportedBitDepth(CrowncutError, ValueError):
    pass


class IoFailure(CrowncutError, OSError):
    pass


# -- registration -----------------------------------------------------------


class RegistrationError(CrowncutError):
    """Alignment failure. ``pair`` names the (moving, fixed) bands when known."""

    def __init__(self, message, pair=None):
        super().__init__(message)
        self.pair = pair


class DegenerateImage(RegistrationError, ValueError):
    pass


class DivergedEstimate(RegistrationError, RuntimeError):
    pass


class ConstantBandWarning(UserWarning):
    pass


# -- unet / quant -----------------------------------------------------------


class InvalidConfig(CrowncutError, ValueError):
    pass


class ShapeMismatch(CrowncutError, ValueError):
    pass


class MalformedModelFile(CrowncutError, ValueError):
    pass


class ConfigMismatch(CrowncutError, ValueError):
    pass


class EmptyDataset(CrowncutError, ValueError):
    pass


class EmptyCalibrationSet(CrowncutError, ValueError):
    pass


class MissingCalibration(CrowncutError, KeyError):
    pass


# -- synthdata --------------------------------------------------------------


class PlacementFailure(CrowncutError, RuntimeError):
    pass
