"""Linearized dynamics along a trajectory and Gram-determinant volume decay.

A tangent vector xi = (xi_1..xi_N) obeys the linearization of the transport
system around the base state (c, phi, u):

    d(xi_i)/dt = D lap(xi_i)
                 + P(R grad(phi) + (rho + rho_tilde) grad(psi)) . grad(c_i)
                 - u . grad(xi_i)
                 + D z_i div(xi_i grad(phi) + c_i grad(psi)),

with R = sum_i z_i xi_i and -lap(psi) = R.  The implementation assembles the
same grouped flux form as the primal tendency (div(xi_i w_i + c_i dw_i) with
w_i = D z_i grad(phi) - u), so it is the exact derivative of the primal
right-hand side, dealiasing included.

Volumes spanned by n tangent vectors are measured in the H1-weighted species
inner product.  Long-horizon volume decay is tracked by periodic
re-orthonormalization: each event applies the inverse Cholesky factor of the
Gram matrix and accrues log diag(R), which avoids underflow of V_n itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import BodyCharge, NpdState, SpeciesParams, leray_project
from .spectral import SpectralGrid, random_band_limited
from .timestepper import NonFinite, StepperConfig, stable_dt, step


class UnderResolved(Exception):
    """Re-orthonormalization hit the singular cutoff; fit window ends here."""


COND_CUTOFF = 1e12


@dataclass
class TangentVector:
    """One tangent direction, stored spectrally (one coefficient array per species)."""

    grid: SpectralGrid
    xi_hats: list

    def copy(self) -> "TangentVector":
        return TangentVector(self.grid, [h.copy() for h in self.xi_hats])

    def scaled(self, a: float) -> "TangentVector":
        return TangentVector(self.grid, [a * h for h in self.xi_hats])


@dataclass
class TangentSet:
    vectors: list

    @property
    def n(self) -> int:
        return len(self.vectors)

    @property
    def grid(self) -> SpectralGrid:
        return self.vectors[0].grid

    def copy(self) -> "TangentSet":
        return TangentSet([v.copy() for v in self.vectors])


def tangent_nonlinear_hat(
    state: NpdState, params: SpeciesParams, body: BodyCharge, xi: TangentVector
) -> list:
    """Non-diffusive part of the linearized right-hand side (what the
    integrating-factor stages advance explicitly)."""
    grid = state.grid
    d = state.ensure_derived(params, body)
    D = params.diffusivity

    r_hat = np.zeros(grid.shape, dtype=complex)
    for z, h in zip(params.valences, xi.xi_hats):
        r_hat += z * h
    psi_hat = grid.inverse_laplacian(_strip_mean(grid, r_hat))
    grad_psi = [grid.inverse(g) for g in grid.gradient(psi_hat)]
    r_phys = grid.inverse(r_hat)

    # velocity perturbation du = -P(dealias(R grad(phi) + total grad(psi)))
    force = [
        r_phys * gp + d["total"] * gs for gp, gs in zip(d["grad_phi"], grad_psi)
    ]
    force_hats = [grid.dealias(grid.forward(fj)) for fj in force]
    du_hat = [-fj for fj in leray_project(grid, force_hats)]
    du = [grid.inverse(h) for h in du_hat]

    out = []
    for z, ci, xh in zip(params.valences, state.c, xi.xi_hats):
        xi_phys = grid.inverse(xh)
        w = d["drift"][z]
        dw = [D * z * gs - duj for gs, duj in zip(grad_psi, du)]
        flux_hats = [
            grid.dealias(grid.forward(xi_phys * wj + ci * dwj))
            for wj, dwj in zip(w, dw)
        ]
        out.append(grid.divergence(flux_hats))
    return out


def tangent_tendency_hat(
    state: NpdState, params: SpeciesParams, body: BodyCharge, xi: TangentVector
) -> list:
    """Full spectral right-hand side of the linearized equation."""
    nl = tangent_nonlinear_hat(state, params, body, xi)
    grid = state.grid
    D = params.diffusivity
    return [n + D * grid.laplacian(h) for n, h in zip(nl, xi.xi_hats)]


def _strip_mean(grid: SpectralGrid, fhat: np.ndarray) -> np.ndarray:
    out = fhat.copy()
    out[(0,) * grid.dim] = 0.0
    return out


def tangent_tendency(
    state: NpdState, params: SpeciesParams, body: BodyCharge, xi: TangentVector
) -> TangentVector:
    return TangentVector(state.grid, tangent_tendency_hat(state, params, body, xi))


def step_tangents(
    state_t: NpdState,
    state_next: NpdState,
    params: SpeciesParams,
    body: BodyCharge,
    tset: TangentSet,
    dt: float,
) -> TangentSet:
    """Integrating-factor RK2 matching the primal step: the first stage is
    evaluated on the base at t, the corrector on the base at t + dt."""
    grid = state_t.grid
    E = np.exp(-params.diffusivity * grid.k_sq * dt)
    new_vectors = []
    for vec in tset.vectors:
        n1 = tangent_nonlinear_hat(state_t, params, body, vec)
        star = TangentVector(
            grid, [E * (h + dt * a) for h, a in zip(vec.xi_hats, n1)]
        )
        n2 = tangent_nonlinear_hat(state_next, params, body, star)
        new_hats = [
            E * h + 0.5 * dt * (E * a + b)
            for h, a, b in zip(vec.xi_hats, n1, n2)
        ]
        if not all(np.all(np.isfinite(h)) for h in new_hats):
            raise NonFinite(f"non-finite tangent vector at t={state_next.time}")
        new_vectors.append(TangentVector(grid, new_hats))
    return TangentSet(new_vectors)


# -- Gram volumes ---------------------------------------------------------------


def gram_matrix(tset: TangentSet) -> np.ndarray:
    grid = tset.grid
    n = tset.n
    g = np.empty((n, n))
    for j in range(n):
        for l in range(j, n):
            val = grid.v_inner(tset.vectors[j].xi_hats, tset.vectors[l].xi_hats)
            g[j, l] = val
            g[l, j] = val
    return g


def gram_volume(tset: TangentSet) -> float:
    """sqrt(det G); 0 once the Gram matrix is numerically singular."""
    g = gram_matrix(tset)
    evals = np.linalg.eigvalsh(g)
    if evals[0] <= 0 or evals[-1] / evals[0] > COND_CUTOFF:
        return 0.0
    return float(np.exp(0.5 * np.sum(np.log(evals))))


def orthonormalize(tset: TangentSet) -> tuple:
    """In the v-inner metric: returns (orthonormal set, log diag of the Cholesky R).

    The spanned flags V_n satisfy log V_n = sum_{j<=n} log R_jj.  Raises
    UnderResolved at the singular cutoff.
    """
    g = gram_matrix(tset)
    evals = np.linalg.eigvalsh(g)
    if evals[0] <= 0 or evals[-1] / max(evals[0], 1e-300) > COND_CUTOFF:
        raise UnderResolved("tangent set Gram matrix is numerically singular")
    r = np.linalg.cholesky(g).T  # G = R^T R, R upper triangular
    r_inv = np.linalg.inv(r)
    grid = tset.grid
    n = tset.n
    new_vectors = []
    for m in range(n):
        hats = [np.zeros(grid.shape, dtype=complex) for _ in tset.vectors[0].xi_hats]
        for j in range(m + 1):
            coeff = r_inv[j, m]
            if coeff != 0.0:
                for h, src in zip(hats, tset.vectors[j].xi_hats):
                    h += coeff * src
        new_vectors.append(TangentVector(grid, hats))
    return TangentSet(new_vectors), np.log(np.diag(r))


def random_tangent_set(
    grid: SpectralGrid,
    params: SpeciesParams,
    n: int,
    seed: int,
    k_max: float,
    r_zero: bool = False,
) -> TangentSet:
    """v-inner-orthonormal random set; mean-free per species (tangent directions
    preserve species means), optionally constrained to zero charge R = 0."""
    rng = np.random.default_rng(seed)
    z = np.array(params.valences)
    z_sq = float(np.sum(z**2))
    vectors = []
    for _ in range(n):
        fields = [
            random_band_limited(grid, k_max, rng, normalize_sup=False)
            for _ in range(params.n_species)
        ]
        if r_zero:
            r = np.zeros(grid.shape)
            for zi, f in zip(z, fields):
                r += zi * f
            fields = [f - zi * r / z_sq for zi, f in zip(z, fields)]
        vectors.append(TangentVector(grid, [grid.forward(f) for f in fields]))
    tset, _ = orthonormalize(TangentSet(vectors))
    return tset


# -- volume-decay experiment ------------------------------------------------------


@dataclass(frozen=True)
class RateRow:
    n: int
    rate: float
    rate_over_n2: float
    fit_r2: float
    t0: float
    t1: float

    @property
    def positive(self) -> bool:
        return self.rate > 0.0


@dataclass(frozen=True)
class VolumeDecayResult:
    rows: list  # RateRow per requested n
    times: np.ndarray
    log_volumes: dict  # n -> cumulative log V_n at each recorded time


def volume_decay_experiment(
    w0: NpdState,
    params: SpeciesParams,
    body: BodyCharge,
    n_list: list,
    t0: float,
    t1: float,
    seed: int = 0,
    k_max: float | None = None,
    renorm_every: int = 5,
    r_zero: bool = False,
    stepper: StepperConfig | None = None,
) -> VolumeDecayResult:
    """Evolve an orthonormal tangent set along the trajectory from w0 and fit
    -d(log V_n)/dt over [t0, t1] for each requested n."""
    grid = w0.grid
    n_max = max(n_list)
    if min(n_list) < 1:
        raise ValueError("tangent counts must be >= 1")
    if stepper is None:
        stepper = StepperConfig(t_end=t1, output_every=max(t1, 1e-6))
    k_max = k_max if k_max is not None else grid.n // 4

    tset = random_tangent_set(grid, params, n_max, seed, k_max, r_zero=r_zero)
    state = w0
    cum = np.zeros(n_max)
    times = [state.time]
    cum_history = [cum.copy()]

    dt = None
    steps = 0
    while state.time < t1 - 1e-12:
        if stepper.dt == "auto":
            if steps % stepper.refresh_every == 0:
                dt = stable_dt(state, params, body, stepper.cfl, stepper.dt_max)
        else:
            dt = float(stepper.dt)
        dt_step = min(dt, t1 - state.time)
        new_state = step(state, params, body, dt_step)
        tset = step_tangents(state, new_state, params, body, tset, dt_step)
        state = new_state
        steps += 1
        if steps % renorm_every == 0 or state.time >= t1 - 1e-12:
            tset, log_diag = orthonormalize(tset)
            cum = cum + log_diag
            times.append(state.time)
            cum_history.append(cum.copy())

    times = np.asarray(times)
    log_volumes = {
        n: np.array([np.sum(c[:n]) for c in cum_history]) for n in n_list
    }
    rows = []
    for n in n_list:
        rows.append(_fit_rate_row(times, log_volumes[n], n, t0, t1))
    return VolumeDecayResult(rows=rows, times=times, log_volumes=log_volumes)


def _fit_rate_row(times, logv, n, t0, t1) -> RateRow:
    mask = (times >= t0 - 1e-12) & (times <= t1 + 1e-12)
    if np.sum(mask) < 3:
        raise ValueError("fit window contains fewer than 3 re-orthonormalization events")
    tt, vv = times[mask], logv[mask]
    slope, intercept = np.polyfit(tt, vv, 1)
    fit = slope * tt + intercept
    ss_res = float(np.sum((vv - fit) ** 2))
    ss_tot = float(np.sum((vv - np.mean(vv)) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    rate = -float(slope)
    return RateRow(
        n=n, rate=rate, rate_over_n2=rate / n**2, fit_r2=r2, t0=float(t0), t1=float(t1)
    )


def heat_rate_oracle(grid: SpectralGrid, params: SpeciesParams, n: int, r_zero: bool) -> float:
    """Exact volume-decay rate of the pure-diffusion tangent flow: D times the
    sum of the n smallest Laplacian eigenvalues over the admissible mean-free
    modes, enumerated from the wavenumber lattice.

    Each nonzero lattice point contributes one real direction per admissible
    species combination: N - 1 combinations under the R = 0 constraint, N
    otherwise."""
    mult = params.n_species - 1 if r_zero else params.n_species
    if mult < 1:
        raise ValueError("R = 0 constraint needs at least two species")
    eigs = np.repeat(np.sort(grid.k_sq[grid.k_sq > 0].ravel()), mult)
    if len(eigs) < n:
        raise ValueError("grid too small to supply n admissible modes")
    return params.diffusivity * float(np.sum(eigs[:n]))
