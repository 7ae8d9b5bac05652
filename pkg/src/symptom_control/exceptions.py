"""Exception hierarchy shared by the pipeline stages."""


class SymptomControlError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(SymptomControlError, ValueError):
    """Input data or configuration violates a documented constraint."""


class InsufficientDataError(SymptomControlError):
    """Too few observations/transitions/patients for the requested computation."""


class DegenerateInputError(SymptomControlError):
    """Input has no usable variance (e.g. all items constant)."""


class NonInvertibleError(SymptomControlError):
    """A matrix stayed singular after the maximum allowed ridge."""


class NonConvergentError(SymptomControlError):
    """The boundary-value solve failed the convergence criteria."""


class NumericalOverflowError(NonConvergentError):
    """Non-finite values appeared during integration."""


class IllConditionedError(SymptomControlError):
    """Controllability Gramian too ill-conditioned to invert reliably."""


class InfeasibleError(SymptomControlError):
    """Target state is not reachable with the given input matrix."""


class UndefinedCorrelationError(SymptomControlError):
    """A variable is constant after ranking so its correlation is undefined."""


class CollinearityError(SymptomControlError):
    """Design or control set is rank deficient."""


class InternalConsistencyError(SymptomControlError):
    """An algorithmic postcondition failed; indicates a bug or numerical breakdown."""
