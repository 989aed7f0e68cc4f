"""Exception hierarchy. Each family maps onto a CLI exit code."""


class GrangerError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(GrangerError, ValueError):
    exit_code = 2


class ShapeError(ConfigError):
    """Operand shapes do not agree."""


class SchemaError(ConfigError):
    """Input file is missing a required column."""


class ParseError(ConfigError):
    """Input file could not be parsed."""


class FormatError(ParseError):
    """Checkpoint has an unsupported format version."""


class BracketError(ConfigError):
    def __init__(self, message, lo_record=None, hi_record=None):
        super().__init__(message)
        self.lo_record = lo_record
        self.hi_record = hi_record


class MixedSweepError(ConfigError):
    pass


class ContractError(GrangerError):
    """API misuse (e.g. non-scalar loss passed to backward)."""

    exit_code = 2


class NumericError(GrangerError, ArithmeticError):
    exit_code = 3


class DomainError(NumericError, ValueError):
    """Argument outside the mathematical domain of a function."""


class DegenerateError(NumericError):
    """Zero variance where a positive one is required."""


class SingularDesignError(NumericError):
    pass


class StageError(GrangerError):
    """Wraps an error raised inside a named pipeline stage."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)


class StorageError(GrangerError, OSError):
    exit_code = 4
