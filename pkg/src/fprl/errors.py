"""Exception types shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 1,
DataError -> 2, NumericError -> 3.
"""


class FprlError(Exception):
    """Base class for package errors."""


class ShapeError(FprlError):
    """Operands have incompatible shapes."""


class DomainError(FprlError):
    """An argument is outside the mathematical domain of the operation."""


class DegenerateInputError(FprlError):
    """Input is structurally valid but degenerate (e.g. a zero-norm vector)."""


class StructuralError(FprlError):
    """Internal bookkeeping (index sets, segments, parameter shapes) is inconsistent."""


class ConfigError(FprlError):
    """A configuration value or file is invalid."""


class DataError(FprlError):
    """A data file is missing, corrupt, or does not match its declared format."""


class NumericError(FprlError):
    """A kernel produced NaN/Inf, or a gradient is non-finite; the step must abort."""
