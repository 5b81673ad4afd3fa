"""Exception hierarchy shared by all tsrnnt modules."""


class TsrnntError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(TsrnntError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(TsrnntError, ArithmeticError):
    """A NaN or otherwise non-finite value reached a checked operation."""


class ContractError(TsrnntError, ValueError):
    """A precondition of an operation was violated."""


class ConfigError(TsrnntError, ValueError):
    """Invalid configuration value."""


class FormatError(TsrnntError, ValueError):
    """Malformed input file."""


class DegenerateInputError(TsrnntError, ValueError):
    """Input carries no usable signal (e.g. zero power)."""


class UnsplittableError(TsrnntError, ValueError):
    """An utterance cannot be split into enrollment and command parts."""


class IntegrityError(TsrnntError):
    """Checkpoint payload or config hash does not match its header."""
