"""Pseudo-spectral simulation and diagnostics for periodic N-species
electrodiffusion coupled to Darcy flow."""

from .diagnostics import (
    DiagnosticsRecord,
    FitResult,
    MismatchedTrajectories,
    energy_balance_residual,
    fit_decay_rate,
    observe,
    poincare_ratio,
    twin_separation,
    v_distance,
)
from .model import (
    BodyCharge,
    NpdState,
    SpeciesParams,
    ValidationReport,
    charge_density,
    darcy_velocity,
    leray_project,
    solve_potential,
    tendency,
    validate_state,
)
from .scenarios import ScenarioSpec, gaussian_blob_state, neutral_body_charge, random_state
from .spectral import NonNeutralSource, SpectralGrid, make_grid, resample
from .tangent import (
    TangentSet,
    TangentVector,
    UnderResolved,
    gram_volume,
    random_tangent_set,
    step_tangents,
    tangent_tendency,
    volume_decay_experiment,
)
from .timestepper import (
    NegativityBreach,
    NonFinite,
    StepperConfig,
    TimeoutIncomplete,
    integrate,
    stable_dt,
    step,
)

__version__ = "0.1.0"
