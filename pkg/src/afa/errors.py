"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Array shapes are incompatible with the operation."""


class ParameterError(ValueError):
    """An argument is outside its valid domain."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class StructuralError(ValueError):
    """Models do not share an architecture."""


class InvariantError(AssertionError):
    """An internal invariant was violated (e.g. unbalanced skip stack)."""


class TrainingError(RuntimeError):
    """Training diverged."""


class IntegrityError(IOError):
    """A checkpoint manifest and payload disagree."""


class VersionError(IOError):
    """A checkpoint was written with an unsupported format version."""
