"""Exception hierarchy shared by every module."""


class KhgqaError(Exception):
    """Base class for all package errors."""


class DataError(KhgqaError):
    """Raised for malformed or inconsistent input data (CLI exit status 2)."""


class ConfigError(KhgqaError):
    """Raised for invalid configuration (CLI exit status 1)."""


class ArityMismatch(DataError):
    pass


class EmptyInput(DataError):
    pass


class UnknownEntity(DataError, KeyError):
    pass


class UnknownRelation(DataError, KeyError):
    pass


class PositionOutOfRange(DataError, IndexError):
    pass


class UnknownQueryType(ConfigError, KeyError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None, position=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if position is not None:
            where.append(f"pos {position}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(message + suffix)
        self.line = line
        self.position = position


class SamplingFailed(DataError):
    pass


class SamplingExhausted(DataError):
    pass


class ShapeMismatch(KhgqaError, ValueError):
    pass


class NotScalar(KhgqaError, ValueError):
    pass


class MissingChildEmbedding(KhgqaError, KeyError):
    pass


class TooFewChildren(KhgqaError, ValueError):
    pass


class EmptyDataset(DataError):
    pass


class EmptySequence(KhgqaError, ValueError):
    pass


class PositionClash(KhgqaError, ValueError):
    pass


class NegationUnsupported(KhgqaError, ValueError):
    pass


class EmptyHardSet(KhgqaError, ValueError):
    pass


class IndexOutOfRange(KhgqaError, IndexError):
    pass
