"""Exception types shared across the package."""


class KpipesError(Exception):
    """Base class for all package-specific errors."""


class MatrixFormatError(KpipesError):
    """Raised when a Matrix Market file cannot be parsed.

    Carries the 1-based line number of the offending line when known.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class PartitionMismatchError(KpipesError):
    """Operands carry incompatible block-row partitions."""


class DeliveryError(KpipesError):
    """A message was addressed to a failed node (detected at the sender)."""


class ReductionFailedError(KpipesError):
    """A participant failed before the collective reduction completed."""


class BreakdownError(KpipesError):
    """An iterative method hit a non-positive or zero scalar it must divide by.

    Usually indicates the matrix or preconditioner is not SPD.
    """

    def __init__(self, scalar, value, iteration):
        super().__init__(
            f"breakdown: scalar '{scalar}' = {value!r} at iteration {iteration} "
            "(matrix or preconditioner not SPD?)"
        )
        self.scalar = scalar
        self.value = value
        self.iteration = iteration


class UnrecoverableFailureError(KpipesError):
    """Recovery is impossible: more simultaneous failures than the redundancy
    level covers, or required backups are missing."""


class LocalSolveError(KpipesError):
    """A local reconstruction system is singular or did not converge."""
