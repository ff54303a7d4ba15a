import numpy as np
import pytest

from npdsim.model import BodyCharge, NpdState, SpeciesParams
from npdsim.scenarios import ScenarioSpec, neutral_body_charge, random_state
from npdsim.spectral import make_grid
from npdsim.timestepper import (
    NegativityBreach,
    NonFinite,
    StepperConfig,
    TimeoutIncomplete,
    integrate,
    stable_dt,
    step,
)

G3 = make_grid(3, 16)
PARAMS = SpeciesParams(1.0, (1.0, -1.0))


def equilibrium_state(grid, level=1.0):
    return NpdState(grid=grid, time=0.0, c=[np.full(grid.shape, level) for _ in range(2)])


def heat_state(grid, eps=0.01, diffusivity=1.0):
    """c1 = c2 gives rho = 0: the system reduces to the exact heat equation."""
    x = grid.axes()[0]
    c = 1.0 + eps * np.cos(x)
    return NpdState(grid=grid, time=0.0, c=[c.copy(), c.copy()])


def test_config_validation():
    with pytest.raises(ValueError):
        StepperConfig(dt=-0.1, t_end=1.0, output_every=0.1)
    with pytest.raises(ValueError):
        StepperConfig(cfl=1.5, t_end=1.0, output_every=0.1)
    with pytest.raises(ValueError):
        StepperConfig(t_end=1.0, output_every=-1.0)
    StepperConfig(dt="auto", t_end=1.0, output_every=0.1)


def test_step_equilibrium_is_fixed_point():
    s0 = equilibrium_state(G3)
    s1 = step(s0, PARAMS, BodyCharge.zero(G3), 0.123)
    for a, b in zip(s0.c, s1.c):
        assert np.max(np.abs(a - b)) < 1e-14


def test_step_pure_diffusion_is_exact():
    eps, dt = 0.01, 0.37
    s0 = heat_state(G3, eps)
    s1 = step(s0, PARAMS, BodyCharge.zero(G3), dt)
    amp = 2 * s1.grid.forward(s1.c[0])[1, 0, 0].real
    assert abs(amp - eps * np.exp(-dt)) <= 1e-12 * eps


def test_step_richardson_order_two():
    spec = ScenarioSpec(
        dim=3, n=16, valences=(1.0, -1.0), means=(1.0, 1.0), eps=0.3, k_max=4, seed=3,
        body="band_limited", body_amplitude=0.3, body_k_max=2, body_seed=9,
    )
    s0 = random_state(spec)
    body = neutral_body_charge(spec, s0)
    p = spec.species_params()

    def advance(dt, T=0.2):
        s = s0
        for _ in range(int(round(T / dt))):
            s = step(s, p, body, dt)
        return s

    ref = advance(0.2 / 64)
    errs = []
    for dt in (0.05, 0.025, 0.0125):
        s = advance(dt)
        errs.append(np.sqrt(sum(np.sum((a - b) ** 2) for a, b in zip(s.c, ref.c))))
    for e_coarse, e_fine in zip(errs, errs[1:]):
        order = np.log2(e_coarse / e_fine)
        assert 1.8 <= order <= 2.2


def test_step_preserves_means():
    spec = ScenarioSpec(dim=3, n=16, valences=(1.0, -1.0), means=(1.0, 2.0), eps=0.5, k_max=4, seed=5)
    s0 = random_state(spec)
    body = neutral_body_charge(spec, s0)
    s1 = step(s0, spec.species_params(), body, 0.01)
    for m0, m1 in zip(s0.means(), s1.means()):
        assert abs(m1 - m0) <= 1e-13 * abs(m0)


def test_step_negativity_breach():
    x = G3.axes()[0]
    c = 0.05 + 0.2 * np.cos(x)  # dips well below the monitor floor
    s = NpdState(grid=G3, time=0.0, c=[c.copy(), c.copy()])
    with pytest.raises(NegativityBreach):
        step(s, PARAMS, BodyCharge.zero(G3), 0.01)


def test_step_non_finite_on_unstable_dt():
    # large total concentration makes the explicit electromigration stiff;
    # a deliberately oversized step must blow up loudly
    spec = ScenarioSpec(dim=3, n=16, valences=(1.0, -1.0), means=(25.0, 25.0), eps=5.0, k_max=2, seed=1)
    s = random_state(spec)
    body = neutral_body_charge(spec, s)
    with pytest.raises((NonFinite, NegativityBreach)):
        for _ in range(400):
            s = step(s, spec.species_params(), body, 0.2)


def test_stable_dt_equilibrium_returns_cap():
    s = equilibrium_state(G3)
    assert stable_dt(s, PARAMS, BodyCharge.zero(G3), cfl=0.4, dt_max=0.05) == 0.05


def test_stable_dt_formula():
    # inject a derived cache with |u|_max = 1 and no electromigration drift
    s = equilibrium_state(G3)
    body = BodyCharge.zero(G3)
    u = [np.zeros(G3.shape) for _ in range(3)]
    u[0][0, 0, 0] = 1.0
    s._cache["derived"] = {
        "key": (id(PARAMS), id(body)),
        "u": u,
        "grad_phi": [np.zeros(G3.shape) for _ in range(3)],
    }
    dt = stable_dt(s, PARAMS, body, cfl=0.4, dt_max=10.0)
    assert abs(dt - 0.4 * (2 * np.pi / 16)) < 1e-14


def test_stable_dt_quadratic_scaling_probe():
    # doubling the charge amplitude roughly quarters dt once u dominates
    base = ScenarioSpec(dim=3, n=16, valences=(1.0, -1.0), means=(60.0, 60.0), eps=25.0,
                        charge_fraction=1.0, k_max=2, seed=8)
    double = ScenarioSpec(dim=3, n=16, valences=(1.0, -1.0), means=(60.0, 60.0), eps=50.0,
                          charge_fraction=1.0, k_max=2, seed=8)
    dts = []
    for spec in (base, double):
        s = random_state(spec)
        body = neutral_body_charge(spec, s)
        dts.append(stable_dt(s, spec.species_params(), body, cfl=0.4, dt_max=1e9))
    ratio = dts[0] / dts[1]
    assert 2.5 <= ratio <= 4.5


def test_integrate_t_end_zero_returns_input():
    s0 = equilibrium_state(G3)
    cfg = StepperConfig(t_end=0.0, output_every=0.1)
    out = integrate(s0, PARAMS, BodyCharge.zero(G3), cfg)
    assert out is s0


def test_integrate_pure_diffusion_analytic():
    eps, D = 0.02, 1.0
    s0 = heat_state(G3, eps)
    cfg = StepperConfig(dt="auto", t_end=1.0, output_every=0.25, dt_max=0.01)
    out = integrate(s0, PARAMS, BodyCharge.zero(G3), cfg)
    amp = 2 * out.grid.forward(out.c[0])[1, 0, 0].real
    assert abs(amp - eps * np.exp(-D)) <= 1e-8


def test_integrate_is_deterministic():
    spec = ScenarioSpec(dim=2, n=16, valences=(1.0, -1.0), means=(1.0, 1.0), eps=0.3, k_max=4, seed=2)
    cfg = StepperConfig(dt="auto", t_end=0.5, output_every=0.1, dt_max=0.01)
    finals = []
    for _ in range(2):
        s0 = random_state(spec)
        body = neutral_body_charge(spec, s0)
        finals.append(integrate(s0, spec.species_params(), body, cfg))
    for a, b in zip(finals[0].c, finals[1].c):
        assert np.array_equal(a, b)


def test_integrate_means_invariant():
    spec = ScenarioSpec(dim=2, n=32, valences=(1.0, -1.0), means=(1.0, 2.0), eps=0.5, k_max=6, seed=4,
                        body="band_limited", body_amplitude=0.3, body_k_max=2, body_seed=5)
    s0 = random_state(spec)
    body = neutral_body_charge(spec, s0)
    means0 = s0.means()
    cfg = StepperConfig(dt="auto", t_end=1.0, output_every=0.5, dt_max=0.02)
    out = integrate(s0, spec.species_params(), body, cfg)
    for m0, m1 in zip(means0, out.means()):
        assert abs(m1 - m0) <= 1e-12 * abs(m0)


def test_integrate_observer_cadence():
    s0 = equilibrium_state(G3)
    times = []
    cfg = StepperConfig(dt=0.01, t_end=0.5, output_every=0.1)
    integrate(s0, PARAMS, BodyCharge.zero(G3), cfg, (lambda s: times.append(s.time),))
    assert np.allclose(times, [0.0, 0.1, 0.2, 0.3, 0.4, 0.5], atol=1e-12)


def test_integrate_max_steps_timeout():
    s0 = heat_state(G3)
    cfg = StepperConfig(dt=1e-4, t_end=1.0, output_every=0.5, max_steps=10)
    with pytest.raises(TimeoutIncomplete):
        integrate(s0, PARAMS, BodyCharge.zero(G3), cfg)
