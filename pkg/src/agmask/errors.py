"""Exception hierarchy shared across the package."""


class AgmaskError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(AgmaskError):
    """Shapes or sizes of the operands do not line up."""


class FormatError(AgmaskError):
    """A file or wire payload does not match its declared format."""


class ConfigError(AgmaskError):
    """Invalid configuration value."""


class DegenerateEmbeddingError(AgmaskError):
    """An embedding has (near-)zero norm and cannot be normalized."""


class NoActivationError(AgmaskError):
    """The attention map is identically zero; no prompt can be derived."""
