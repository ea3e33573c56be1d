"""Exception hierarchy shared by every subsystem."""


class BagelError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(BagelError, ValueError):
    """Array extents are incompatible with the requested operation."""


class ConfigurationError(BagelError, ValueError):
    """A configuration value is out of its valid domain."""


class LayoutError(BagelError, ValueError):
    """A sample layout or attention mask violates its invariants."""


class PackingError(BagelError, ValueError):
    pass


class InputError(BagelError, ValueError):
    """Model inputs do not cover the splits declared by a layout."""


class ContractError(BagelError, RuntimeError):
    """An internal contract (e.g. KV-cache purity) would be violated."""


class SamplingError(BagelError, FloatingPointError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class NonFiniteLossError(BagelError, FloatingPointError):
    def __init__(self, message: str, dump: dict | None = None):
        super().__init__(message)
        self.dump = dump or {}


class LoadError(BagelError, IOError):
    """A checkpoint cannot be read or does not match the requested model."""
