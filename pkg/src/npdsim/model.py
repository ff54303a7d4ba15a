"""Right-hand side of the N-species electrodiffusion / Darcy system.

State variables are the ionic concentrations c_1..c_N on the torus.  Derived
fields:

    rho = sum_i z_i c_i                      (charge density)
    -lap(phi) = rho + rho_tilde              (potential, zero-mean gauge)
    u = -P((rho + rho_tilde) grad(phi))      (Darcy velocity, P = Leray)

and each concentration evolves by

    dc_i/dt = -u.grad(c_i) + D lap(c_i) + D z_i div(c_i grad(phi)).

Both nonlinear products are formed pseudo-spectrally (physical product,
forward transform, 2/3-rule dealias) and the transported terms are assembled
in divergence form, which makes every species mean exactly conserved.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .spectral import NonNeutralSource, SpectralGrid

NEUTRALITY_RTOL = 1e-8
NEGATIVITY_RTOL = 1e-6


@dataclass(frozen=True)
class SpeciesParams:
    """Shared diffusivity and valences; all |z_i| must coincide."""

    diffusivity: float
    valences: tuple

    def __post_init__(self):
        object.__setattr__(self, "valences", tuple(float(z) for z in self.valences))
        if self.diffusivity <= 0:
            raise ValueError("diffusivity must be positive")
        if len(self.valences) < 1:
            raise ValueError("need at least one species")
        mags = [abs(z) for z in self.valences]
        if max(mags) - min(mags) > 1e-12 * max(max(mags), 1.0):
            raise ValueError(f"valence magnitudes must all be equal, got {self.valences}")

    @property
    def n_species(self) -> int:
        return len(self.valences)

    @property
    def z_magnitude(self) -> float:
        return abs(self.valences[0])


@dataclass(frozen=True)
class BodyCharge:
    """Fixed, time-independent body charge forcing the potential."""

    grid: SpectralGrid
    rho_tilde: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.rho_tilde)):
            raise ValueError("body charge must be finite-valued")

    @classmethod
    def zero(cls, grid: SpectralGrid) -> "BodyCharge":
        return cls(grid=grid, rho_tilde=np.zeros(grid.shape))

    @property
    def mean(self) -> float:
        return self.grid.mean(self.rho_tilde)

    @property
    def rho_tilde_hat(self) -> np.ndarray:
        cached = getattr(self, "_hat_cache", None)
        if cached is None:
            cached = self.grid.forward(self.rho_tilde)
            object.__setattr__(self, "_hat_cache", cached)
        return cached


@dataclass
class NpdState:
    """Concentration fields at one time instant plus lazily cached derived fields.

    Treat instances as immutable snapshots: build new states with `with_c`.
    The derived cache (rho, phi, u, ...) is keyed on the params/body objects
    used to compute it and is never carried over to derived states, so one
    tendency evaluation performs exactly one Poisson solve and one projection.
    """

    grid: SpectralGrid
    time: float
    c: list
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.c = [np.asarray(ci, dtype=float) for ci in self.c]
        for ci in self.c:
            if ci.shape != self.grid.shape:
                raise ValueError("concentration shape does not match grid")

    @property
    def n_species(self) -> int:
        return len(self.c)

    def with_c(self, c_new: list, time: float, c_hats: list | None = None) -> "NpdState":
        state = NpdState(grid=self.grid, time=time, c=list(c_new))
        if c_hats is not None:
            state._cache["c_hats"] = list(c_hats)
        return state

    def c_hats(self) -> list:
        hats = self._cache.get("c_hats")
        if hats is None:
            hats = [self.grid.forward(ci) for ci in self.c]
            self._cache["c_hats"] = hats
        return hats

    def ensure_derived(self, params: SpeciesParams, body: BodyCharge) -> dict:
        key = (id(params), id(body))
        d = self._cache.get("derived")
        if d is not None and d["key"] == key:
            return d
        d = _compute_derived(self, params, body)
        d["key"] = key
        self._cache["derived"] = d
        return d

    def min_concentration(self) -> float:
        return float(min(np.min(ci) for ci in self.c))

    def means(self) -> list:
        return [self.grid.mean(ci) for ci in self.c]


def charge_density(state: NpdState, params: SpeciesParams) -> np.ndarray:
    """Pointwise rho = sum_i z_i c_i."""
    rho = np.zeros(state.grid.shape)
    for z, ci in zip(params.valences, state.c):
        rho += z * ci
    return rho


def neutrality_residual(grid: SpectralGrid, rho: np.ndarray, body: BodyCharge) -> float:
    """|integral(rho + rho_tilde)| over the torus."""
    return abs(grid.integral(rho + body.rho_tilde))


def neutrality_tolerance(
    grid: SpectralGrid, rho: np.ndarray, body: BodyCharge, abs_floor: float = 0.0
) -> float:
    # relative tolerance on the charge scale, plus a machine-noise floor: the
    # measured integral carries quadrature roundoff proportional to the field
    # sup, which dominates once the charge itself has decayed to tiny values
    scale = grid.l2_norm(rho) + grid.l2_norm(body.rho_tilde)
    if abs_floor == 0.0:
        abs_floor = (
            1e-12
            * grid.volume
            * (float(np.max(np.abs(rho))) + float(np.max(np.abs(body.rho_tilde))))
        )
    return NEUTRALITY_RTOL * scale + abs_floor


def check_neutrality(
    grid: SpectralGrid, rho: np.ndarray, body: BodyCharge, abs_floor: float = 0.0
) -> None:
    resid = neutrality_residual(grid, rho, body)
    if resid > neutrality_tolerance(grid, rho, body, abs_floor):
        raise NonNeutralSource(
            "total charge integral is nonzero; the scenario is inconsistent "
            f"(residual {resid:.3e})"
        )


def solve_potential(rho: np.ndarray, body: BodyCharge) -> np.ndarray:
    """Solve -lap(phi) = rho + rho_tilde with the zero-mean gauge."""
    grid = body.grid
    check_neutrality(grid, rho, body)
    src_hat = grid.forward(rho) + body.rho_tilde_hat
    # neutrality already verified; strip the roundoff-level mean before the
    # strict mean-free solve
    src_hat[(0,) * grid.dim] = 0.0
    return grid.inverse(grid.inverse_laplacian(src_hat))


def leray_project(grid: SpectralGrid, vhat: list) -> list:
    """Modewise v - k (k.v)/|k|^2; the mean mode passes through unchanged."""
    kv = grid.k[0] * vhat[0]
    for kj, vj in zip(grid.k[1:], vhat[1:]):
        kv = kv + kj * vj
    kv_over_ksq = kv / grid.k_sq_safe
    kv_over_ksq[(0,) * grid.dim] = 0.0
    return [vj - kj * kv_over_ksq for kj, vj in zip(grid.k, vhat)]


def darcy_velocity(rho: np.ndarray, body: BodyCharge, phi: np.ndarray) -> list:
    """u = -P(dealias((rho + rho_tilde) grad(phi))), divergence-free by construction."""
    grid = body.grid
    total = rho + body.rho_tilde
    grad_phi = [grid.inverse(g) for g in grid.gradient(grid.forward(phi))]
    force_hat = [grid.dealias(grid.forward(total * gj)) for gj in grad_phi]
    u_hat = [-uj for uj in leray_project(grid, force_hat)]
    return [grid.inverse(uj) for uj in u_hat]


def _state_neutrality_floor(state: NpdState, params: SpeciesParams) -> float:
    return (
        1e-12
        * state.grid.volume
        * sum(abs(z) * float(np.max(np.abs(ci))) for z, ci in zip(params.valences, state.c))
    )


def _compute_derived(state: NpdState, params: SpeciesParams, body: BodyCharge) -> dict:
    grid = state.grid
    c_hats = state.c_hats()
    rho = charge_density(state, params)
    check_neutrality(grid, rho, body, _state_neutrality_floor(state, params))
    rho_hat = np.zeros(grid.shape, dtype=complex)
    for z, ch in zip(params.valences, c_hats):
        rho_hat += z * ch
    total = rho + body.rho_tilde
    total_hat = rho_hat + body.rho_tilde_hat
    src_hat = total_hat.copy()
    src_hat[(0,) * grid.dim] = 0.0
    phi_hat = grid.inverse_laplacian(src_hat)
    grad_phi_hat = grid.gradient(phi_hat)
    grad_phi = [grid.inverse(g) for g in grad_phi_hat]
    force_hat = [grid.dealias(grid.forward(total * gj)) for gj in grad_phi]
    u_hat = [-uj for uj in leray_project(grid, force_hat)]
    u = [grid.inverse(uj) for uj in u_hat]
    # drift fields w_z = D z grad(phi) - u; at most two distinct valences
    D = params.diffusivity
    drift = {}
    for z in set(params.valences):
        drift[z] = [D * z * gj - uj for gj, uj in zip(grad_phi, u)]
    return {
        "rho": rho,
        "rho_hat": rho_hat,
        "total": total,
        "phi_hat": phi_hat,
        "phi": grid.inverse(phi_hat),
        "grad_phi": grad_phi,
        "u_hat": u_hat,
        "u": u,
        "drift": drift,
    }


def nonlinear_tendency_hat(state: NpdState, params: SpeciesParams, body: BodyCharge) -> list:
    """Spectral advection + electromigration terms, div(c_i (D z_i grad(phi) - u)).

    Divergence form guarantees an exactly zero mean mode for every species.
    """
    grid = state.grid
    d = state.ensure_derived(params, body)
    out = []
    for z, ci in zip(params.valences, state.c):
        w = d["drift"][z]
        flux_hats = [grid.dealias(grid.forward(ci * wj)) for wj in w]
        out.append(grid.divergence(flux_hats))
    return out


def tendency(state: NpdState, params: SpeciesParams, body: BodyCharge) -> list:
    """Full time derivative of each concentration, in physical space."""
    grid = state.grid
    nl = nonlinear_tendency_hat(state, params, body)
    c_hats = state.c_hats()
    D = params.diffusivity
    return [grid.inverse(nli + D * grid.laplacian(ch)) for nli, ch in zip(nl, c_hats)]


@dataclass(frozen=True)
class ValidationReport:
    min_concentration: float
    neutrality_residual: float
    neutrality_ok: bool
    nonnegativity_ok: bool
    divergence_residual: float
    divergence_ok: bool
    means: tuple
    rho_mean: float
    sigma_mean: float

    @property
    def ok(self) -> bool:
        return self.neutrality_ok and self.nonnegativity_ok and self.divergence_ok


def validate_state(state: NpdState, params: SpeciesParams, body: BodyCharge) -> ValidationReport:
    """Report-only health check: nonnegativity, neutrality, div-free velocity, means."""
    grid = state.grid
    rho = charge_density(state, params)
    resid = neutrality_residual(grid, rho, body)
    neutral_ok = resid <= neutrality_tolerance(
        grid, rho, body, _state_neutrality_floor(state, params)
    )
    min_c = state.min_concentration()
    sup0 = max(np.max(np.abs(ci)) for ci in state.c)
    nonneg_ok = min_c >= -NEGATIVITY_RTOL * max(sup0, 1e-300)
    if neutral_ok:
        d = state.ensure_derived(params, body)
        div_u = grid.l2_norm_spectral(grid.divergence(d["u_hat"]))
        u_h1 = np.sqrt(
            sum(grid.sobolev_norm(uj, 1, homogeneous=False) ** 2 for uj in d["u_hat"])
        )
        # a velocity at roundoff level (pure-gradient forcing) is trivially solenoidal
        state_scale = np.sqrt(
            sum(grid.sobolev_norm(ch, 1, homogeneous=False) ** 2 for ch in state.c_hats())
        )
        if u_h1 <= 1e-13 * max(state_scale, 1e-300):
            div_resid = 0.0
        else:
            div_resid = div_u / u_h1
        div_ok = div_resid <= 1e-10
    else:
        div_resid = float("nan")
        div_ok = False
    sigma = np.zeros(grid.shape)
    for ci in state.c:
        sigma += ci
    return ValidationReport(
        min_concentration=min_c,
        neutrality_residual=resid,
        neutrality_ok=neutral_ok,
        nonnegativity_ok=nonneg_ok,
        divergence_residual=div_resid,
        divergence_ok=div_ok,
        means=tuple(state.means()),
        rho_mean=grid.mean(rho),
        sigma_mean=grid.mean(sigma),
    )
