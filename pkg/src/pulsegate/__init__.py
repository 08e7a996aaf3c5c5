"""Design, evaluation and verification of pulsed-force sequences for fast
optical-phase-insensitive two-ion geometric phase gates."""

from .core import (
    MODES,
    PSI_SIGN,
    SPIN_FLIP,
    SPIN_STATES,
    CouplingTable,
    Pulse,
    PulseSequence,
    SequenceError,
    SymmetricParams,
    TrapConfig,
    canonical_coupling,
    expand_shaped,
    expand_symmetric,
    free_parameter_count,
    total_area,
    validate,
)
from .fidelity import (
    ConditionResiduals,
    GateMetrics,
    NormalizationError,
    SpinEchoEvaluation,
    averaged_epsilon,
    condition_residuals,
    gate_metrics,
    normalize_psi,
    psi_mean,
    spin_echo,
)
from .phasespace import (
    LightShiftSummary,
    OrbitSummary,
    accumulate_orbit,
    circle_fn,
    compose_at_phase,
    lightshift_theta_plus,
    orbit_trajectory,
    pulse_A_pm,
)

__version__ = "0.1.0"
