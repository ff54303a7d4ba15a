import numpy as np
import pytest

from npdsim.model import charge_density, solve_potential, validate_state
from npdsim.scenarios import (
    ScenarioSpec,
    blob_mass,
    gaussian_blob_state,
    neutral_body_charge,
    random_state,
)
from npdsim.spectral import make_grid


def test_spec_validation():
    with pytest.raises(ValueError):
        ScenarioSpec(valences=(1.0, -1.0), means=(1.0,))
    with pytest.raises(ValueError):
        ScenarioSpec(valences=(1.0, -1.0), means=(1.0, -1.0))
    with pytest.raises(ValueError):
        ScenarioSpec(body="gaussian")


def test_zero_eps_gives_equilibrium():
    spec = ScenarioSpec(dim=2, n=16, valences=(1.0, -1.0), means=(0.7, 0.7), eps=0.0)
    s = random_state(spec)
    for ci, mean in zip(s.c, spec.means):
        assert np.max(np.abs(ci - mean)) < 1e-15


def test_seeded_generation_is_deterministic():
    spec = ScenarioSpec(dim=2, n=32, valences=(1.0, -1.0), means=(1.0, 1.0), eps=0.3, seed=42)
    a = random_state(spec)
    b = random_state(spec)
    for ca, cb in zip(a.c, b.c):
        assert np.array_equal(ca, cb)


def test_rejects_eps_at_least_min_mean():
    spec = ScenarioSpec(dim=2, n=16, valences=(1.0, -1.0), means=(1.0, 0.5), eps=0.5)
    with pytest.raises(ValueError):
        random_state(spec)


def test_construction_properties_over_50_seeds():
    for seed in range(50):
        spec = ScenarioSpec(
            dim=2, n=16, valences=(1.0, -1.0), means=(1.0, 1.0), eps=0.5, k_max=4, seed=seed
        )
        s = random_state(spec)
        assert s.min_concentration() >= 0.5 - 1e-12
        for ci, mean in zip(s.c, spec.means):
            assert abs(s.grid.mean(ci) - mean) <= 1e-13
            assert np.max(np.abs(ci - mean)) <= spec.eps * (1 + 1e-12)


def test_charge_fraction_projects_charge_out():
    spec = ScenarioSpec(
        dim=2, n=16, valences=(1.0, -1.0, 1.0), means=(0.5, 1.0, 0.5), eps=0.3,
        charge_fraction=0.0, k_max=4, seed=3,
    )
    s = random_state(spec)
    rho = charge_density(s, spec.species_params())
    assert np.max(np.abs(rho)) < 1e-13


def test_generated_states_pass_validation():
    for seed in range(5):
        spec = ScenarioSpec(
            dim=2, n=16, valences=(1.0, -1.0), means=(2.0, 1.0), eps=0.5, k_max=4, seed=seed,
            body="band_limited", body_amplitude=0.4, body_k_max=2, body_seed=seed + 100,
        )
        s = random_state(spec)
        body = neutral_body_charge(spec, s)
        rep = validate_state(s, spec.species_params(), body)
        assert rep.ok


def test_neutral_body_none_recipe_mean_free_rho():
    spec = ScenarioSpec(dim=2, n=16, valences=(1.0, -1.0), means=(1.0, 1.0), eps=0.2, seed=1)
    s = random_state(spec)
    body = neutral_body_charge(spec, s)
    assert np.max(np.abs(body.rho_tilde)) < 1e-14


def test_neutral_body_cancels_rho_mean_exactly():
    # means (2, 1) with z = (1, -1): integral(rho0) = volume
    spec = ScenarioSpec(dim=2, n=16, valences=(1.0, -1.0), means=(2.0, 1.0), eps=0.2, seed=1)
    s = random_state(spec)
    body = neutral_body_charge(spec, s)
    rho0 = charge_density(s, spec.species_params())
    total = s.grid.integral(rho0) + s.grid.integral(body.rho_tilde)
    assert abs(total) <= 1e-12 * s.grid.volume


def test_neutral_body_enables_potential_solve():
    spec = ScenarioSpec(
        dim=2, n=16, valences=(1.0, -1.0), means=(2.0, 1.0), eps=0.2, seed=1,
        body="band_limited", body_amplitude=0.3, body_k_max=3, body_seed=7,
    )
    s = random_state(spec)
    body = neutral_body_charge(spec, s)
    phi = solve_potential(charge_density(s, spec.species_params()), body)
    assert np.all(np.isfinite(phi))


def test_blob_zero_amplitude_is_equilibrium():
    spec = ScenarioSpec(dim=2, n=16, valences=(1.0, -1.0), means=(1.0, 1.0))
    s = gaussian_blob_state(spec, [None, None], [0.5, 0.5], [0.0, 0.0])
    for ci, mean in zip(s.c, spec.means):
        assert np.max(np.abs(ci - mean)) < 1e-15


def test_blob_mean_shift_matches_mass():
    spec = ScenarioSpec(dim=2, n=32, valences=(1.0, -1.0), means=(1.0, 1.0))
    grid = spec.grid()
    width, amp = 0.5, 0.8
    s = gaussian_blob_state(spec, [(np.pi, np.pi), None], [width, width], [amp, 0.0], grid)
    shift = grid.mean(s.c[0]) - 1.0
    expected = blob_mass(grid, width, amp) / grid.volume
    assert abs(shift - expected) <= 1e-10 * expected
    assert abs(grid.mean(s.c[1]) - 1.0) < 1e-14
    assert s.min_concentration() >= 1.0 - 1e-12


def test_opposite_valence_blobs_drive_flow():
    spec = ScenarioSpec(dim=3, n=16, valences=(1.0, -1.0), means=(1.0, 1.0))
    grid = spec.grid()
    s = gaussian_blob_state(
        spec,
        [(2.0, np.pi, np.pi), (4.0, np.pi, np.pi)],
        [0.6, 0.6],
        [0.5, 0.5],
        grid,
    )
    body = neutral_body_charge(spec, s)
    d = s.ensure_derived(spec.species_params(), body)
    assert max(np.max(np.abs(uj)) for uj in d["u"]) > 1e-6


def test_mass_bound_metadata():
    spec = ScenarioSpec(dim=3, n=16, valences=(1.0, -1.0), means=(1.0, 2.0))
    assert abs(spec.mass_bound - 3.0 * (2 * np.pi) ** 3) < 1e-10


def test_grid_matches_spec():
    g = make_grid(2, 16)
    spec = ScenarioSpec(dim=2, n=16, valences=(1.0, -1.0), means=(1.0, 1.0))
    assert spec.grid().shape == g.shape
    assert spec.effective_k_max == 4
