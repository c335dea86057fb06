"""Exception types shared across the package."""


class BroxdiffError(Exception):
    """Base class for all package errors."""


class GridError(BroxdiffError):
    """Grid sizes incompatible with the requested operation."""


class SymmetryError(BroxdiffError):
    """Hermitian symmetry violated (field or multiplier would not be real)."""


class LevelError(BroxdiffError):
    """Truncation level out of range for the available noise."""


class ParameterError(BroxdiffError):
    """Scalar parameter outside its admissible range."""


class ContractionError(BroxdiffError):
    """Fixed-point iteration failed to contract; a larger reference level is needed."""


class ConditioningError(BroxdiffError):
    """Iterative linear solve stagnated before reaching the requested residual."""


class WeightResolutionError(GridError):
    """The exponential weight is not resolved on the grid; enlarge M."""
