"""Integrating-factor Heun time stepping for the electrodiffusion system.

Diffusion is applied exactly through the semigroup E(dt) = exp(-D |k|^2 dt),
so the linear subproblem is unconditionally stable and species means are
conserved to machine precision; the transported terms are advanced with an
explicit two-stage (RK2) update:

    chat* (t+dt)  = E(dt) (chat + dt Nhat(c))
    chat  (t+dt)  = E(dt) chat + dt/2 (E(dt) Nhat(c) + Nhat(c*))

Instability is surfaced loudly as NonFinite rather than silently damped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import NEGATIVITY_RTOL, BodyCharge, NpdState, SpeciesParams, nonlinear_tendency_hat


class NonFinite(Exception):
    """A field stopped being finite: blow-up or an unstable step size."""


class NegativityBreach(Exception):
    """A concentration undershoot exceeded the monitoring tolerance."""


class TimeoutIncomplete(Exception):
    """max_steps was exhausted before reaching t_end."""


@dataclass(frozen=True)
class StepperConfig:
    dt: object = "auto"  # positive float or "auto"
    cfl: float = 0.4
    t_end: float = 1.0
    output_every: float = 0.1
    max_steps: int = 1_000_000
    dt_max: float = 0.02
    refresh_every: int = 10  # steps between stable_dt refreshes

    def __post_init__(self):
        if self.dt != "auto":
            if not (float(self.dt) > 0):
                raise ValueError("dt must be positive or 'auto'")
        if not (0 < self.cfl <= 1):
            raise ValueError("cfl must lie in (0, 1]")
        if self.t_end < 0:
            raise ValueError("t_end must be nonnegative")
        if self.output_every <= 0:
            raise ValueError("output_every must be positive")
        if self.dt_max <= 0:
            raise ValueError("dt_max must be positive")


def _negativity_floor(state: NpdState) -> float:
    sup = max(np.max(np.abs(ci)) for ci in state.c)
    return -NEGATIVITY_RTOL * max(sup, 1e-300)


def _check_state(state: NpdState, floor: float) -> None:
    min_c = state.min_concentration()
    if not np.isfinite(min_c):
        raise NonFinite(f"non-finite concentration at t={state.time}")
    if min_c < floor:
        raise NegativityBreach(
            f"min concentration {min_c:.3e} fell below monitor floor {floor:.3e} "
            f"at t={state.time}"
        )


def step(
    state: NpdState,
    params: SpeciesParams,
    body: BodyCharge,
    dt: float,
    negativity_floor: float | None = None,
) -> NpdState:
    """One integrating-factor RK2 step of length dt."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    grid = state.grid
    floor = _negativity_floor(state) if negativity_floor is None else negativity_floor
    _check_state(state, floor)

    E = np.exp(-params.diffusivity * grid.k_sq * dt)
    c_hats = state.c_hats()
    n1 = nonlinear_tendency_hat(state, params, body)

    star_hats = [E * (ch + dt * n) for ch, n in zip(c_hats, n1)]
    star = state.with_c([grid.inverse(h) for h in star_hats], state.time + dt, c_hats=star_hats)
    if not all(np.isfinite(np.min(ci)) for ci in star.c):
        raise NonFinite(f"non-finite predictor at t={state.time + dt}")
    n2 = nonlinear_tendency_hat(star, params, body)

    new_hats = [
        E * ch + 0.5 * dt * (E * a + b) for ch, a, b in zip(c_hats, n1, n2)
    ]
    new_state = state.with_c(
        [grid.inverse(h) for h in new_hats], state.time + dt, c_hats=new_hats
    )
    if not all(np.isfinite(np.min(ci)) for ci in new_state.c):
        raise NonFinite(f"non-finite state at t={new_state.time}")
    return new_state


def stable_dt(
    state: NpdState,
    params: SpeciesParams,
    body: BodyCharge,
    cfl: float = 0.4,
    dt_max: float = 0.02,
) -> float:
    """cfl * dx / V_max with V_max = max|u| + D max|z| max|grad(phi)|, capped at dt_max."""
    d = state.ensure_derived(params, body)
    u_mag_sq = sum(uj**2 for uj in d["u"])
    gphi_mag_sq = sum(gj**2 for gj in d["grad_phi"])
    v_max = float(np.sqrt(np.max(u_mag_sq)))
    v_max += params.diffusivity * params.z_magnitude * float(np.sqrt(np.max(gphi_mag_sq)))
    if v_max <= 0.0:
        return dt_max
    return min(cfl * state.grid.spacing / v_max, dt_max)


def integrate(
    state: NpdState,
    params: SpeciesParams,
    body: BodyCharge,
    config: StepperConfig,
    observers: tuple = (),
) -> NpdState:
    """Advance to t_end, invoking observers at every multiple of output_every.

    Output boundaries sit on the absolute time lattice j * output_every, and
    the step-size refresh counter is re-anchored at each boundary, so a run
    resumed from a boundary checkpoint retraces the unbroken run exactly.
    """
    t_end = float(config.t_end)
    out_dt = float(config.output_every)
    floor = _negativity_floor(state)

    j0 = int(round(state.time / out_dt))
    if abs(state.time - j0 * out_dt) > 1e-9 * max(out_dt, 1.0):
        raise ValueError("initial time must sit on the output lattice")

    for obs in observers:
        obs(state)
    if t_end <= state.time:
        return state

    steps = 0
    j = j0
    dt_current = None
    while state.time < t_end - 1e-12:
        boundary = min((j + 1) * out_dt, t_end)
        steps_in_segment = 0
        while state.time < boundary - 1e-12:
            if steps >= config.max_steps:
                raise TimeoutIncomplete(
                    f"max_steps={config.max_steps} exhausted at t={state.time}"
                )
            if config.dt == "auto":
                if steps_in_segment % config.refresh_every == 0:
                    dt_current = stable_dt(state, params, body, config.cfl, config.dt_max)
            else:
                dt_current = float(config.dt)
            dt_step = dt_current
            remaining = boundary - state.time
            if remaining <= dt_step * (1 + 1e-12):
                dt_step = remaining
            state = step(state, params, body, dt_step, negativity_floor=floor)
            if dt_step == remaining:
                state.time = boundary  # land exactly on the lattice
            steps += 1
            steps_in_segment += 1
        j += 1
        # drop caches at the boundary so a resumed run (which rebuilds its
        # spectra from the stored physical fields) retraces this run bit-exactly
        state = state.with_c(state.c, state.time)
        for obs in observers:
            obs(state)
    return state
