"""Observables along a trajectory and the post-hoc fits built on them.

Covers: species means and sup/min monitoring, Lp deviations of the charge
density rho and total concentration sigma from their means, gradient and
higher spectral Sobolev norms, the discrete quadratic energy balance

    d/dt (1/2)(||rho||^2 + z^2 ||sigma||^2)
        + D (||grad rho||^2 + z^2 ||grad sigma||^2 + z^2 ||rho sqrt(sigma)||^2)
        = -D z^2 integral(rho rho_tilde sigma),

exponential-plus-offset decay fits, empirical Poincare-inequality constants,
and twin-trajectory separations in the H1-weighted species norm."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import curve_fit

from .model import BodyCharge, NpdState, SpeciesParams, charge_density
from .spectral import SpectralGrid

LP_ORDERS = (2, 3, 4, 6)
CLAMP_MASS_LIMIT = 1e-3


class MismatchedTrajectories(Exception):
    """Twin trajectories do not share their output time grid."""


@dataclass(frozen=True)
class DiagnosticsRecord:
    time: float
    means: tuple
    min_c: float
    grad_l2: tuple  # ||grad c_i||_L2 per species
    lp_dev: dict  # (label, p) -> ||f - fbar||_Lp for labels "rho", "sigma", species index
    hk_sq: dict  # k -> sum_i homogeneous ||(-lap)^{k/2} c_i||^2
    energy_residual: float
    # internal energy-identity terms, reused for the residual between snapshots
    energy_quad: float
    dissipation: float
    body_term: float
    clamp_fraction: float


def _energy_terms(state: NpdState, params: SpeciesParams, body: BodyCharge):
    """(E, dissipation, body term, clamped mass fraction) of the quadratic identity."""
    grid = state.grid
    z = params.z_magnitude
    D = params.diffusivity
    rho = charge_density(state, params)
    sigma = np.zeros(grid.shape)
    for ci in state.c:
        sigma += ci
    rho_hat = grid.forward(rho)
    sigma_hat = grid.forward(sigma)
    energy = 0.5 * (grid.l2_norm(rho) ** 2 + z**2 * grid.l2_norm(sigma) ** 2)
    sigma_clamped = np.maximum(sigma, 0.0)
    clamp_fraction = float(
        np.sum(np.abs(sigma - sigma_clamped)) / max(np.sum(np.abs(sigma)), 1e-300)
    )
    dissipation = D * (
        grid.sobolev_norm(rho_hat, 1) ** 2
        + z**2 * grid.sobolev_norm(sigma_hat, 1) ** 2
        + z**2 * grid.l2_norm(rho * np.sqrt(sigma_clamped)) ** 2
    )
    body_term = D * z**2 * grid.integral(rho * body.rho_tilde * sigma)
    return energy, dissipation, body_term, clamp_fraction


def observe(
    state: NpdState,
    params: SpeciesParams,
    body: BodyCharge,
    prev_record: DiagnosticsRecord | None = None,
) -> DiagnosticsRecord:
    """Compute every tracked observable; Lp norms by grid quadrature, Sobolev
    norms by spectral multiplier sums."""
    grid = state.grid
    c_hats = state.c_hats()
    rho = charge_density(state, params)
    sigma = np.zeros(grid.shape)
    for ci in state.c:
        sigma += ci

    lp_dev = {}
    for label, f in (("rho", rho), ("sigma", sigma)):
        dev = f - grid.mean(f)
        for p in LP_ORDERS:
            lp_dev[(label, p)] = grid.lp_norm(dev, p)
    for i, ci in enumerate(state.c):
        dev = ci - grid.mean(ci)
        for p in LP_ORDERS:
            lp_dev[(i, p)] = grid.lp_norm(dev, p)

    grad_l2 = tuple(grid.sobolev_norm(ch, 1) for ch in c_hats)
    hk_sq = {
        k: float(sum(grid.sobolev_norm(ch, k) ** 2 for ch in c_hats)) for k in (1, 2, 3)
    }
    energy, dissipation, body_term, clamp_fraction = _energy_terms(state, params, body)

    if prev_record is None:
        residual = 0.0
    else:
        residual = _residual_from_terms(
            prev_record.time,
            state.time,
            (prev_record.energy_quad, prev_record.dissipation, prev_record.body_term),
            (energy, dissipation, body_term),
            max(prev_record.clamp_fraction, clamp_fraction),
        )

    return DiagnosticsRecord(
        time=state.time,
        means=tuple(state.means()),
        min_c=state.min_concentration(),
        grad_l2=grad_l2,
        lp_dev=lp_dev,
        hk_sq=hk_sq,
        energy_residual=residual,
        energy_quad=energy,
        dissipation=dissipation,
        body_term=body_term,
        clamp_fraction=clamp_fraction,
    )


def _residual_from_terms(t_a, t_b, terms_a, terms_b, clamp_fraction):
    if clamp_fraction > CLAMP_MASS_LIMIT:
        return float("nan")
    e_a, diss_a, body_a = terms_a
    e_b, diss_b, body_b = terms_b
    dt = t_b - t_a
    # identity: dE/dt + dissipation + body term = 0, body moved left; the
    # defect is a rate, normalized by the energy scale, and is O(dt^2) along
    # discrete trajectories
    raw = (e_b - e_a) / dt + 0.5 * (diss_a + diss_b) + 0.5 * (body_a + body_b)
    scale = 0.5 * (e_a + e_b) + 1e-300
    return abs(raw) / scale


def energy_balance_residual(
    state_a: NpdState, state_b: NpdState, params: SpeciesParams, body: BodyCharge
) -> float:
    """Normalized defect of the quadratic energy identity between two snapshots.

    O(dt^2) for consecutive steps of the integrator; NaN if the sqrt(sigma)
    clamp moved more than 0.1% of the grid mass.
    """
    ta, tb = state_a.time, state_b.time
    if tb <= ta:
        raise ValueError("snapshots must be time-ordered")
    terms_a = _energy_terms(state_a, params, body)
    terms_b = _energy_terms(state_b, params, body)
    return _residual_from_terms(
        ta, tb, terms_a[:3], terms_b[:3], max(terms_a[3], terms_b[3])
    )


# -- decay fits ---------------------------------------------------------------


@dataclass(frozen=True)
class FitResult:
    rate: float
    offset: float
    r_squared: float
    degenerate: bool = False


def fit_decay_rate(t, y, window: tuple | None = None) -> FitResult:
    """Fit y(t) ~ C1 exp(-rate t) + C2.

    The offset C2 is seeded with the tail median and refined by alternating
    log-linear fits with offset updates, then polished by nonlinear least
    squares, so a clean exponential recovers C2 ~ 0 instead of inheriting the
    tail level.  A flat window returns the degenerate result (rate 0, r2 0).
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if window is not None:
        mask = (t >= window[0]) & (t <= window[1])
        t, y = t[mask], y[mask]
    if len(t) < 10:
        raise ValueError("need at least 10 points in the fit window")
    if np.any(y <= 0) and np.ptp(y) > 0:
        # offsets below zero are never fitted; callers pass positive series
        raise ValueError("series must be positive on the fit window")

    span = float(np.ptp(y))
    y_scale = max(abs(float(np.median(y))), 1e-300)
    if span <= 1e-12 * y_scale:
        return FitResult(rate=0.0, offset=float(np.median(y)), r_squared=0.0, degenerate=True)

    n_tail = max(3, len(y) // 5)
    y_min = float(np.min(y))
    c2 = min(float(np.median(y[-n_tail:])), y_min - 1e-9 * span)

    c1, rate = _log_linear(t, y, c2, span)
    for _ in range(100):
        resid_tail = y[-n_tail:] - c1 * np.exp(-rate * t[-n_tail:])
        c2_new = min(float(np.median(resid_tail)), y_min - 1e-12 * span)
        if abs(c2_new - c2) <= 1e-14 * y_scale:
            c2 = c2_new
            break
        c2 = c2_new
        c1, rate = _log_linear(t, y, c2, span)

    # nonlinear polish; fall back to the iterated estimate if it fails
    try:
        popt, _ = curve_fit(
            lambda tt, a, r, b: a * np.exp(-r * tt) + b,
            t,
            y,
            p0=(c1, rate, c2),
            maxfev=10000,
        )
        c1_p, rate_p, c2_p = (float(v) for v in popt)
        if np.isfinite(rate_p) and c1_p > 0 and np.all(y - c2_p > 0):
            sse_old = float(np.sum((c1 * np.exp(-rate * t) + c2 - y) ** 2))
            sse_new = float(np.sum((c1_p * np.exp(-rate_p * t) + c2_p - y) ** 2))
            if sse_new <= sse_old:
                c1, rate, c2 = c1_p, rate_p, c2_p
    except (RuntimeError, TypeError, ValueError):
        pass

    z = np.log(y - c2)
    fit = np.log(c1) - rate * t
    ss_res = float(np.sum((z - fit) ** 2))
    ss_tot = float(np.sum((z - np.mean(z)) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
    return FitResult(rate=float(rate), offset=float(c2), r_squared=r2)


def _log_linear(t, y, c2, span):
    z = np.log(np.maximum(y - c2, 1e-9 * span))
    slope, intercept = np.polyfit(t, z, 1)
    return math.exp(intercept), -slope


# -- Poincare diagnostics -----------------------------------------------------


def poincare_ratio(grid: SpectralGrid, f: np.ndarray, p: int) -> float:
    """Empirical constant of the Lp Poincare inequality on the torus:

        ||f - fbar||_Lp^p /
            (p^2 ||(f - fbar)^{(p-2)/2} grad f||_L2^2 + (2/vol) ||f - fbar||_{L^{p/2}}^p)
    """
    if p not in LP_ORDERS:
        raise ValueError(f"p must be one of {LP_ORDERS}")
    dev = f - grid.mean(f)
    num = grid.lp_norm(dev, p) ** p
    grad = [grid.inverse(g) for g in grid.gradient(grid.forward(f))]
    grad_sq = np.zeros(grid.shape)
    for gj in grad:
        grad_sq += gj**2
    weighted = grid.integral(np.abs(dev) ** (p - 2) * grad_sq)
    lower = (2.0 / grid.volume) * grid.lp_norm(dev, p / 2.0) ** p
    den = p**2 * weighted + lower
    if den < 1e-30:
        return 0.0
    return float(num / den)


def spectral_gap_ratio(grid: SpectralGrid, f: np.ndarray) -> float:
    """||f - fbar||_L2^2 / ||grad f||_L2^2, bounded by 1 on [0, 2pi]^d."""
    fhat = grid.forward(f)
    fhat[(0,) * grid.dim] = 0.0
    num = grid.l2_norm_spectral(fhat) ** 2
    den = grid.sobolev_norm(fhat, 1) ** 2
    if den < 1e-30:
        return 0.0
    return float(num / den)


# -- twin trajectories --------------------------------------------------------


def v_distance(grid: SpectralGrid, c_a: list, c_b: list) -> float:
    """H1-weighted distance between two species tuples (physical fields)."""
    diff_hats = [grid.forward(a - b) for a, b in zip(c_a, c_b)]
    return grid.v_norm(diff_hats)


def twin_separation(grid: SpectralGrid, traj_a: list, traj_b: list) -> list:
    """Separation series for two snapshot lists [(t, [c_1..c_N]), ...].

    Returns [(t, distance, distance / initial distance)]; raises
    MismatchedTrajectories when the time grids differ.
    """
    if len(traj_a) != len(traj_b):
        raise MismatchedTrajectories("trajectories have different lengths")
    times_a = [t for t, _ in traj_a]
    times_b = [t for t, _ in traj_b]
    if any(abs(ta - tb) > 1e-12 * max(1.0, abs(ta)) for ta, tb in zip(times_a, times_b)):
        raise MismatchedTrajectories("trajectories have different output times")
    dists = [v_distance(grid, ca, cb) for (_, ca), (_, cb) in zip(traj_a, traj_b)]
    d0 = dists[0] if dists[0] > 0 else 1.0
    return [(t, d, d / d0) for t, d in zip(times_a, dists)]


# -- CSV schema ---------------------------------------------------------------


def csv_header(n_species: int) -> list:
    cols = ["t"]
    cols += [f"mean_c{i + 1}" for i in range(n_species)]
    cols += ["min_c"]
    cols += [f"gradL2_c{i + 1}" for i in range(n_species)]
    cols += ["L2_rho_dev", "L3_rho_dev", "L4_rho_dev", "L6_rho_dev", "L2_sigma_dev"]
    cols += ["H1", "H2", "H3", "energy_residual"]
    return cols


def record_to_row(rec: DiagnosticsRecord) -> list:
    row = [rec.time]
    row += list(rec.means)
    row += [rec.min_c]
    row += list(rec.grad_l2)
    row += [rec.lp_dev[("rho", p)] for p in LP_ORDERS]
    row += [rec.lp_dev[("sigma", 2)]]
    row += [rec.hk_sq[1], rec.hk_sq[2], rec.hk_sq[3], rec.energy_residual]
    return row


def format_float(x: float) -> str:
    """17 significant digits: round-trip exact in CSV output."""
    return format(float(x), ".17g")
