"""Target-speaker streaming transducer toolkit."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ConfigError,
    ContractError,
    DegenerateInputError,
    DimensionError,
    FormatError,
    IntegrityError,
    NumericError,
    TsrnntError,
    UnsplittableError,
)
from .model import TSRNNT, ModelConfig  # noqa: E402

__all__ = [
    "__version__", "TSRNNT", "ModelConfig", "TsrnntError", "ConfigError", "ContractError",
    "DegenerateInputError", "DimensionError", "FormatError", "IntegrityError", "NumericError",
    "UnsplittableError",
]
