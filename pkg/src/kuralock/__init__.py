"""Finite-N Kuramoto model toolkit: integration, closed-form thresholds and phase-locking diagnostics."""

__version__ = "0.1.0"

from kuralock.errors import (  # noqa: E402
    BracketError,
    ConfigError,
    DimensionMismatchError,
    InvalidSelectionError,
    KuralockError,
    NoAdmissibleRootsError,
    NumericalFailure,
    ParameterError,
    StepSizeUnderflow,
    UndefinedPhaseError,
)
from kuralock.phase import (  # noqa: E402
    EnsembleSelection,
    FrequencyVector,
    ModelParams,
    OrderParameter,
    PhaseState,
    delta_functional,
    diameter,
    divergence,
    galilean_normalize,
    order_parameter,
    potential,
    wrapped_diameter,
)
from kuralock.dynamics import IntegratorConfig, Trajectory, detect_collisions, integrate, jacobian, rhs  # noqa: E402

__all__ = [
    "BracketError", "ConfigError", "DimensionMismatchError", "InvalidSelectionError", "KuralockError",
    "NoAdmissibleRootsError", "NumericalFailure", "ParameterError", "StepSizeUnderflow", "UndefinedPhaseError",
    "EnsembleSelection", "FrequencyVector", "ModelParams", "OrderParameter", "PhaseState", "delta_functional",
    "diameter", "divergence", "galilean_normalize", "order_parameter", "potential", "wrapped_diameter",
    "IntegratorConfig", "Trajectory", "detect_collisions", "integrate", "jacobian", "rhs",
]
