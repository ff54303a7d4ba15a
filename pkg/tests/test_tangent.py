import numpy as np
import pytest

from npdsim.model import BodyCharge, NpdState, SpeciesParams, tendency
from npdsim.scenarios import ScenarioSpec, neutral_body_charge, random_state
from npdsim.spectral import make_grid, random_band_limited
from npdsim.tangent import (
    TangentSet,
    TangentVector,
    UnderResolved,
    gram_matrix,
    gram_volume,
    heat_rate_oracle,
    orthonormalize,
    random_tangent_set,
    step_tangents,
    tangent_tendency_hat,
    volume_decay_experiment,
)
from npdsim.timestepper import StepperConfig, step

G2 = make_grid(2, 16)
G3 = make_grid(3, 16)
PARAMS = SpeciesParams(1.0, (1.0, -1.0))


def equilibrium(grid, level=0.8):
    return NpdState(grid=grid, time=0.0, c=[np.full(grid.shape, level) for _ in range(2)])


def random_tangent(grid, seed, n_species=2, k_max=4, r_zero=False, valences=(1.0, -1.0)):
    rng = np.random.default_rng(seed)
    fields = [random_band_limited(grid, k_max, rng, normalize_sup=False) for _ in range(n_species)]
    if r_zero:
        z = np.array(valences)
        charged = sum(zi * f for zi, f in zip(z, fields))
        fields = [f - zi * charged / np.sum(z**2) for zi, f in zip(z, fields)]
    return TangentVector(grid, [grid.forward(f) for f in fields]), fields


# -- tangent tendency ---------------------------------------------------------


def test_equilibrium_r_zero_is_pure_heat():
    s = equilibrium(G3)
    xi, _ = random_tangent(G3, 1, r_zero=True)
    out = tangent_tendency_hat(s, PARAMS, BodyCharge.zero(G3), xi)
    for o, h in zip(out, xi.xi_hats):
        assert np.max(np.abs(o - G3.laplacian(h))) < 1e-13 * max(np.max(np.abs(h)), 1e-30)


def test_equilibrium_generic_constant_coefficient_reduction():
    # tendency_i = D lap(xi_i) - D z_i cbar_i R since div(cbar grad(psi)) = -cbar R
    level = 0.8
    s = equilibrium(G3, level)
    xi, fields = random_tangent(G3, 2)
    out = tangent_tendency_hat(s, PARAMS, BodyCharge.zero(G3), xi)
    R = fields[0] - fields[1]
    for o, h, z in zip(out, xi.xi_hats, PARAMS.valences):
        expect = G3.inverse(G3.laplacian(h)) - z * level * R
        assert np.max(np.abs(G3.inverse(o) - expect)) < 1e-12


def test_finite_difference_linearization():
    spec = ScenarioSpec(dim=2, n=32, valences=(1.0, -1.0), means=(1.0, 1.0), eps=0.2, k_max=6, seed=5,
                        body="band_limited", body_amplitude=0.2, body_k_max=2, body_seed=6)
    s = random_state(spec)
    body = neutral_body_charge(spec, s)
    p = spec.species_params()
    xi, fields = random_tangent(s.grid, 7, k_max=6)
    lin = [s.grid.inverse(h) for h in tangent_tendency_hat(s, p, body, xi)]
    eps_fd = 1e-6
    plus = tendency(s.with_c([c + eps_fd * f for c, f in zip(s.c, fields)], 0.0), p, body)
    minus = tendency(s.with_c([c - eps_fd * f for c, f in zip(s.c, fields)], 0.0), p, body)
    fd = [(a - b) / (2 * eps_fd) for a, b in zip(plus, minus)]
    num = np.sqrt(sum(np.sum((a - b) ** 2) for a, b in zip(lin, fd)))
    den = np.sqrt(sum(np.sum(b**2) for b in fd))
    assert num / den <= 1e-5


def test_finite_difference_consistency_along_trajectory():
    spec = ScenarioSpec(dim=2, n=16, valences=(1.0, -1.0), means=(1.0, 1.0), eps=0.3, k_max=3, seed=9,
                        body="band_limited", body_amplitude=0.2, body_k_max=2, body_seed=4)
    s = random_state(spec)
    body = neutral_body_charge(spec, s)
    p = spec.species_params()
    xi, fields = random_tangent(s.grid, 3, k_max=3)
    eps_fd = 1e-6
    for _ in range(3):
        for _ in range(10):
            s = step(s, p, body, 0.01)
        lin = [s.grid.inverse(h) for h in tangent_tendency_hat(s, p, body, xi)]
        plus = tendency(s.with_c([c + eps_fd * f for c, f in zip(s.c, fields)], 0.0), p, body)
        minus = tendency(s.with_c([c - eps_fd * f for c, f in zip(s.c, fields)], 0.0), p, body)
        fd = [(a - b) / (2 * eps_fd) for a, b in zip(plus, minus)]
        num = np.sqrt(sum(np.sum((a - b) ** 2) for a, b in zip(lin, fd)))
        den = np.sqrt(sum(np.sum(b**2) for b in fd))
        assert num / den <= 1e-5


# -- tangent stepping -------------------------------------------------------------


def test_step_tangents_zero_is_zero():
    s = equilibrium(G3)
    zero = TangentVector(G3, [np.zeros(G3.shape, complex) for _ in range(2)])
    out = step_tangents(s, s, PARAMS, BodyCharge.zero(G3), TangentSet([zero]), 0.05)
    assert all(np.max(np.abs(h)) == 0.0 for h in out.vectors[0].xi_hats)


def test_step_tangents_exact_heat_decay():
    s = equilibrium(G3)
    x = G3.axes()[0]
    mode = np.cos(x)
    xi = TangentVector(G3, [G3.forward(mode), G3.forward(mode)])  # R = 0 for z=(1,-1)
    dt = 0.21
    out = step_tangents(s, s, PARAMS, BodyCharge.zero(G3), TangentSet([xi]), dt)
    got = 2 * out.vectors[0].xi_hats[0][1, 0, 0].real
    assert abs(got - np.exp(-dt)) <= 1e-10


def test_step_tangents_linearity():
    spec = ScenarioSpec(dim=2, n=16, valences=(1.0, -1.0), means=(1.0, 1.0), eps=0.3, k_max=3, seed=2)
    s0 = random_state(spec)
    body = neutral_body_charge(spec, s0)
    p = spec.species_params()
    s1 = step(s0, p, body, 0.01)
    xi, _ = random_tangent(s0.grid, 4, k_max=3)
    eta, _ = random_tangent(s0.grid, 5, k_max=3)
    a, b = 1.3, -0.7
    combo = TangentVector(s0.grid, [a * h + b * g for h, g in zip(xi.xi_hats, eta.xi_hats)])
    out = step_tangents(s0, s1, p, body, TangentSet([xi, eta, combo]), 0.01)
    sx, se, sc = out.vectors
    for h, g, c in zip(sx.xi_hats, se.xi_hats, sc.xi_hats):
        scale = max(np.max(np.abs(c)), 1e-30)
        assert np.max(np.abs(a * h + b * g - c)) <= 1e-11 * scale


# -- Gram volumes -------------------------------------------------------------------


def test_gram_volume_orthonormal_set_is_one():
    tset = random_tangent_set(G2, PARAMS, 4, seed=3, k_max=4)
    g = gram_matrix(tset)
    assert np.max(np.abs(g - np.eye(4))) < 1e-10
    assert abs(gram_volume(tset) - 1.0) < 1e-9


def test_gram_volume_duplicate_vector_is_zero():
    tset = random_tangent_set(G2, PARAMS, 2, seed=3, k_max=4)
    dup = TangentSet([tset.vectors[0], tset.vectors[1], tset.vectors[0].copy()])
    assert gram_volume(dup) == 0.0


def test_gram_volume_scales_with_one_vector():
    tset = random_tangent_set(G2, PARAMS, 3, seed=6, k_max=4)
    v0 = gram_volume(tset)
    a = -2.5
    scaled = TangentSet([tset.vectors[0].scaled(a)] + [v.copy() for v in tset.vectors[1:]])
    assert abs(gram_volume(scaled) - abs(a) * v0) <= 1e-10 * abs(a) * v0


def test_gram_volume_invariant_under_rotation():
    tset = random_tangent_set(G2, PARAMS, 3, seed=8, k_max=4)
    rng = np.random.default_rng(0)
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    rotated = []
    for m in range(3):
        hats = [np.zeros(G2.shape, complex) for _ in range(2)]
        for j in range(3):
            for h, src in zip(hats, tset.vectors[j].xi_hats):
                h += q[j, m] * src
        rotated.append(TangentVector(G2, hats))
    v0, v1 = gram_volume(tset), gram_volume(TangentSet(rotated))
    assert abs(v0 - v1) <= 1e-10 * v0


def test_orthonormalize_raises_on_singular_set():
    tset = random_tangent_set(G2, PARAMS, 2, seed=3, k_max=4)
    dup = TangentSet([tset.vectors[0], tset.vectors[0].copy()])
    with pytest.raises(UnderResolved):
        orthonormalize(dup)


# -- volume decay experiment ------------------------------------------------------------


def test_volume_decay_matches_heat_spectrum():
    cfg = StepperConfig(dt=0.02, t_end=4.0, output_every=1.0)
    res = volume_decay_experiment(
        equilibrium(G2, 0.6), PARAMS, BodyCharge.zero(G2), [1, 2, 4],
        t0=1.5, t1=4.0, seed=2, k_max=4, renorm_every=5, r_zero=True, stepper=cfg,
    )
    for row in res.rows:
        oracle = heat_rate_oracle(G2, PARAMS, row.n, r_zero=True)
        assert abs(row.rate - oracle) <= 0.05 * oracle
        assert row.fit_r2 > 0.999


def test_volume_decay_renorm_interval_independence():
    cfg = StepperConfig(dt=0.02, t_end=4.0, output_every=1.0)
    # (a) the accumulated log-volume itself telescopes identically at common
    # event times regardless of the re-orthonormalization interval
    runs = {}
    for m in (5, 20):
        runs[m] = volume_decay_experiment(
            equilibrium(G2, 0.6), PARAMS, BodyCharge.zero(G2), [2],
            t0=1.6, t1=4.0, seed=2, k_max=4, renorm_every=m, r_zero=True, stepper=cfg,
        )
    t5, lv5 = runs[5].times, runs[5].log_volumes[2]
    t20, lv20 = runs[20].times, runs[20].log_volumes[2]
    common = {round(t, 9): v for t, v in zip(t5, lv5)}
    for t, v in zip(t20, lv20):
        key = round(t, 9)
        assert key in common
        assert abs(common[key] - v) <= 1e-9 * max(abs(v), 1.0)
    # (b) on tangents spanning the (invariant) first shell the series is
    # exactly linear and the fitted rates agree to 1e-6 relative
    rates = {}
    for m in (5, 20):
        res = volume_decay_experiment(
            equilibrium(G2, 0.6), PARAMS, BodyCharge.zero(G2), [2],
            t0=1.0, t1=4.0, seed=2, k_max=1, renorm_every=m, r_zero=True, stepper=cfg,
        )
        rates[m] = res.rows[0].rate
    assert abs(rates[5] - rates[20]) <= 1e-6 * abs(rates[20])


def test_volume_decay_superadditivity():
    cfg = StepperConfig(dt=0.02, t_end=4.0, output_every=1.0)
    res = volume_decay_experiment(
        equilibrium(G2, 0.6), PARAMS, BodyCharge.zero(G2), [1, 2, 4],
        t0=1.5, t1=4.0, seed=4, k_max=4, renorm_every=5, r_zero=True, stepper=cfg,
    )
    rates = {row.n: row.rate for row in res.rows}
    assert rates[2] > rates[1]
    assert rates[4] > rates[2]


def test_heat_rate_oracle_enumeration():
    # d=2: |k|^2 sorted shells are 1,1,1,1,2,2,2,2,4,...
    assert heat_rate_oracle(G2, PARAMS, 1, r_zero=True) == 1.0
    assert heat_rate_oracle(G2, PARAMS, 4, r_zero=True) == 4.0
    assert heat_rate_oracle(G2, PARAMS, 5, r_zero=True) == 6.0
    # without the charge constraint each shell direction carries N species combos
    assert heat_rate_oracle(G2, PARAMS, 2, r_zero=False) == 2.0
