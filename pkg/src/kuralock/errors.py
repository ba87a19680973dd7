"""Exception hierarchy shared by every kuralock module."""


class KuralockError(Exception):
    """Base class for all toolkit errors."""


class InvalidSelectionError(KuralockError, ValueError):
    """An index subset is empty, duplicated, or out of range."""


class UndefinedPhaseError(KuralockError):
    """The order-parameter angle was requested while R is (numerically) zero."""


class DimensionMismatchError(KuralockError, ValueError):
    pass


class ParameterError(KuralockError, ValueError):
    """An input lies outside the admissible range of a closed-form quantity."""


class NoAdmissibleRootsError(ParameterError):
    pass


class NumericalFailure(KuralockError):
    """A numerical routine could not deliver a result of the requested quality."""


class StepSizeUnderflow(NumericalFailure):
    """Adaptive integration shrank its step below the floating-point floor.

    ``last_state`` carries the last accepted :class:`~kuralock.phase.PhaseState`.
    """

    def __init__(self, message, last_state):
        super().__init__(message)
        self.last_state = last_state


class BracketError(NumericalFailure):
    """Bisection was handed an interval without a sign change."""

    def __init__(self, message, lo, hi, f_lo, f_hi):
        super().__init__(f"{message} (f({lo!r})={f_lo!r}, f({hi!r})={f_hi!r})")
        self.lo, self.hi, self.f_lo, self.f_hi = lo, hi, f_lo, f_hi


class ConfigError(KuralockError, ValueError):
    pass
