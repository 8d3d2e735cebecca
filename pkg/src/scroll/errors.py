"""Exception types shared across the package."""


class ScrollError(Exception):
    """Base class for all library errors."""


class ConfigError(ScrollError):
    """Invalid configuration, specification, or CLI parameters."""


class FormatError(ScrollError):
    """Malformed file content: bad magic, truncation, unparsable rows."""


class DataError(ScrollError):
    """Structurally valid input containing unusable values."""


class DegenerateInputError(DataError):
    """Input on which an operation is mathematically undefined."""


class ClassIdError(ScrollError):
    """Class id outside the range known to a model state."""


class NoClassError(ScrollError):
    """Prediction requested before any class has been observed."""


class ShapeError(ScrollError):
    """Operand dimensions do not agree."""


class AdaptError(ScrollError):
    """Predictor adaptation cannot proceed."""


class StreamReuseError(ScrollError):
    """A consume-once data stream was accessed more than once."""


class LinAlgFailure(ScrollError):
    """A linear system could not be solved."""
