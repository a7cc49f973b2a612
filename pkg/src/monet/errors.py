"""Exception types shared across the package."""


class MonetError(Exception):
    """Base class for all package errors."""


class DimensionError(MonetError, ValueError):
    """Operand shapes are incompatible with the requested kernel."""


class InputError(MonetError, ValueError):
    """A value is out of its documented domain (e.g. bad class index)."""


class ConfigError(MonetError, ValueError):
    """A model or layer configuration violates its invariants."""


class GeometryError(ConfigError):
    """Token count or image size does not form the required grid."""


class UnsupportedConfigError(ConfigError):
    """The operation is defined only for a subset of configurations."""


class FormatError(MonetError, ValueError):
    """A serialized file is malformed or truncated."""


class NumericError(MonetError, RuntimeError):
    """A computation produced non-finite values."""


class DivergenceError(NumericError):
    """An ODE integration or training step left the finite domain."""


class CapacityError(MonetError, RuntimeError):
    """A symbolic computation exceeded its term budget."""


class AuditError(MonetError, RuntimeError):
    """An operation could not be classified during an op audit."""
