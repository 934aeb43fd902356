"""Exception types raised across the package."""


class BnnError(ValueError):
    """Base class for every diagnostic raised by bnnreuse."""


class ShapeError(BnnError):
    pass


class PlanError(BnnError):
    """A reorder plan does not fit the layer it is applied to."""


class DimensionChainError(BnnError):
    """Consecutive layers disagree on channel count or spatial size."""


class FormatError(BnnError):
    """Malformed model file."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass
