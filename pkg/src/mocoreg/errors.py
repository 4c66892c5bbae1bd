"""Exception types raised by the registration engine."""


class MocoError(Exception):
    """Base class for all engine errors."""


class DegenerateConfiguration(MocoError):
    """Point configuration does not determine a unique rotation."""

    def __init__(self, message, singular_values=None):
        super().__init__(message)
        self.singular_values = singular_values


class GridMismatch(MocoError):
    pass


class EmptyMask(MocoError):
    pass


class ConstantVolume(MocoError):
    pass


class BandExceedsGrid(MocoError):
    pass


class NonFinite(MocoError):
    """Raised when an integrator leaves the finite range."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class TooFewChannels(MocoError):
    pass


class TooFewFrames(MocoError):
    pass


class MissingCase(MocoError):
    pass


class FormatError(MocoError):
    """Malformed or unsupported container file."""


class ConfigError(MocoError, ValueError):
    """Unknown key or invalid value in a run configuration."""
