"""Exception hierarchy shared by every geoformer module."""


class GeoformerError(Exception):
    """Base class for all package errors."""


class DimensionError(GeoformerError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(GeoformerError, ValueError):
    """An operation was called outside its documented preconditions."""


class UnsupportedDepthError(GeoformerError, RuntimeError):
    """Differentiation nested deeper than the engine supports."""


class ConfigError(GeoformerError, ValueError):
    """Invalid or inconsistent configuration."""


class CheckpointVersionError(ConfigError):
    """Checkpoint was written by an incompatible format version."""


class DataError(GeoformerError, ValueError):
    """Malformed or incomplete input data."""


class ParseError(DataError):
    """A data file could not be parsed.

    ``line`` is the 1-based line number of the offending record, when known.
    """

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        prefix = ":".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class NumericError(GeoformerError, FloatingPointError):
    """A non-finite value appeared where finite values are required."""
