"""Exception types raised across the package."""


class HoiCapError(Exception):
    """Base class for all package errors."""


class DegenerateInput(HoiCapError, ValueError):
    pass


class EmptySet(HoiCapError, ValueError):
    pass


class TooShort(HoiCapError, ValueError):
    pass


class ShapeMismatch(HoiCapError, ValueError):
    pass


class MissingAngularVelocity(HoiCapError, ValueError):
    pass


class DegenerateMotion(HoiCapError):
    """Rotation excitation is insufficient to determine the calibration."""


class BehindCamera(HoiCapError):
    pass


class ConfigError(HoiCapError, ValueError):
    """Invalid configuration; ``field`` names the offending key when known."""

    def __init__(self, message, field=None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class PreconditionError(HoiCapError, ValueError):
    pass


class StepOutOfRange(HoiCapError, ValueError):
    pass


class NonFiniteEnergy(HoiCapError, FloatingPointError):
    def __init__(self, message, trace=None):
        self.trace = list(trace or [])
        super().__init__(message)


class NonFiniteLoss(HoiCapError, FloatingPointError):
    def __init__(self, message, trace=None):
        self.trace = list(trace or [])
        super().__init__(message)


class UntrainedDenoiser(HoiCapError):
    pass


class MissingArtifact(HoiCapError, FileNotFoundError):
    """An upstream pipeline file is absent."""
