"""Exception hierarchy shared by every module in the package."""


class E2AError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(E2AError, ValueError):
    pass


class NonFiniteValue(E2AError, FloatingPointError):
    """A NaN or Inf appeared; the current step is aborted."""


class NotScalar(E2AError, ValueError):
    pass


class UnreachableLeaf(E2AError):
    """A requested leaf does not feed into the loss (detached computation)."""


class StateMismatch(E2AError, ValueError):
    pass


class ConfigInvalid(E2AError, ValueError):
    pass


class FormatError(E2AError):
    pass


class ClassOutOfRange(E2AError, IndexError):
    pass


class ZeroGradient(E2AError):
    """Positive margin with a vanishing gradient: the linearised radius is unbounded."""


class DegenerateModel(E2AError):
    pass


class TooFewSamples(E2AError, ValueError):
    pass


class MissingCheckpoint(E2AError, FileNotFoundError):
    pass


class UnknownVariant(E2AError, ValueError):
    pass


class ZeroVariance(UserWarning):
    """Issued when a KDE sample has no spread and a fallback bandwidth is used."""
