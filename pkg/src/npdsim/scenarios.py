"""Admissible initial data: nonnegative concentrations with prescribed means
and a body charge tuned so the total charge integrates to zero exactly."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .model import BodyCharge, NpdState, SpeciesParams, charge_density
from .spectral import SpectralGrid, make_grid, random_band_limited


@dataclass(frozen=True)
class ScenarioSpec:
    """Deterministic recipe for one run's grid, species and initial data."""

    dim: int = 3
    n: int = 32
    diffusivity: float = 1.0
    valences: tuple = (1.0, -1.0)
    means: tuple = (1.0, 1.0)
    eps: float = 0.1
    k_max: float | None = None  # band limit of the noise; default n // 4
    charge_fraction: float = 1.0  # scale of the charged noise component
    seed: int = 0
    body: str = "none"  # "none" | "band_limited"
    body_amplitude: float = 0.0
    body_k_max: float = 2.0
    body_seed: int = 1

    def __post_init__(self):
        object.__setattr__(self, "valences", tuple(float(z) for z in self.valences))
        object.__setattr__(self, "means", tuple(float(m) for m in self.means))
        if len(self.means) != len(self.valences):
            raise ValueError("means and valences must have equal length")
        if any(m <= 0 for m in self.means):
            raise ValueError("species means must be positive")
        if self.eps < 0:
            raise ValueError("eps must be nonnegative")
        if self.body not in ("none", "band_limited"):
            raise ValueError(f"unknown body-charge recipe {self.body!r}")

    @property
    def effective_k_max(self) -> float:
        return float(self.k_max) if self.k_max is not None else self.n // 4

    def species_params(self) -> SpeciesParams:
        return SpeciesParams(diffusivity=self.diffusivity, valences=self.valences)

    def grid(self) -> SpectralGrid:
        return make_grid(self.dim, self.n)

    @property
    def mass_bound(self) -> float:
        # total initial mass sum_i integral(c_i); recorded as run metadata only
        return float(sum(self.means)) * (2 * np.pi) ** self.dim


def random_state(spec: ScenarioSpec, grid: SpectralGrid | None = None) -> NpdState:
    """c_i = mean_i + eps * g_i with g_i seeded, band-limited, mean-free, sup-normalized.

    charge_fraction < 1 damps the valence-weighted component of the noise, so
    the initial charge density carries only that fraction of the perturbation.
    """
    if spec.eps >= min(spec.means):
        raise ValueError("eps must be smaller than every species mean for nonnegativity")
    grid = grid if grid is not None else spec.grid()
    rng = np.random.default_rng(spec.seed)
    if spec.eps == 0.0:
        c = [np.full(grid.shape, mean) for mean in spec.means]
        return NpdState(grid=grid, time=0.0, c=c)
    fields = [random_band_limited(grid, spec.effective_k_max, rng) for _ in spec.means]
    if spec.charge_fraction != 1.0:
        z = np.array(spec.valences)
        z_sq = float(np.sum(z**2))
        charged = np.zeros(grid.shape)
        for zi, g in zip(z, fields):
            charged += zi * g
        fields = [
            g + (spec.charge_fraction - 1.0) * zi * charged / z_sq
            for zi, g in zip(z, fields)
        ]
        # one common factor: per-species rescaling would break the projection
        common = max(np.max(np.abs(g)) for g in fields)
        fields = [g / common for g in fields]
    c = [mean + spec.eps * g for mean, g in zip(spec.means, fields)]
    return NpdState(grid=grid, time=0.0, c=c)


def neutral_body_charge(spec: ScenarioSpec, state0: NpdState) -> BodyCharge:
    """Band-limited body charge whose mean is set so integral(rho0 + rho_tilde) = 0."""
    grid = state0.grid
    rho0 = charge_density(state0, spec.species_params())
    if spec.body == "none":
        raw = np.zeros(grid.shape)
    else:
        rng = np.random.default_rng(spec.body_seed)
        raw = spec.body_amplitude * random_band_limited(grid, spec.body_k_max, rng)
    # set the mean outright rather than projecting: rho_tilde itself need not
    # be mean-free, only the combined charge does
    target_mean = -grid.mean(rho0)
    raw = raw + (target_mean - grid.mean(raw))
    return BodyCharge(grid=grid, rho_tilde=raw)


def gaussian_blob_state(
    spec: ScenarioSpec,
    centers: list,
    widths: list,
    amplitudes: list,
    grid: SpectralGrid | None = None,
) -> NpdState:
    """Means plus periodized Gaussian bumps, one optional blob per species.

    centers[i] is a coordinate tuple or None; amplitudes must be nonnegative
    so the state stays nonnegative by construction.
    """
    grid = grid if grid is not None else spec.grid()
    n_species = len(spec.means)
    if not (len(centers) == len(widths) == len(amplitudes) == n_species):
        raise ValueError("centers, widths, amplitudes must have one entry per species")
    coords = grid.axes()
    c = []
    for mean, center, width, amp in zip(spec.means, centers, widths, amplitudes):
        field = np.full(grid.shape, mean)
        if center is not None and amp != 0.0:
            if width <= 0:
                raise ValueError("blob widths must be positive")
            if amp < 0:
                raise ValueError("blob amplitudes must be nonnegative")
            field = field + amp * _periodized_gaussian(grid, coords, center, width)
        c.append(field)
    return NpdState(grid=grid, time=0.0, c=c)


def _periodized_gaussian(grid: SpectralGrid, coords, center, width: float) -> np.ndarray:
    out = np.zeros(grid.shape)
    for images in itertools.product((-2, -1, 0, 1, 2), repeat=grid.dim):
        r_sq = np.zeros(grid.shape)
        for x, c0, m in zip(coords, center, images):
            r_sq += (x - c0 - 2 * np.pi * m) ** 2
        out += np.exp(-r_sq / (2.0 * width**2))
    return out


def blob_mass(grid: SpectralGrid, width: float, amplitude: float) -> float:
    """Exact mass of one periodized Gaussian blob (periodization preserves it)."""
    return amplitude * (2 * np.pi * width**2) ** (grid.dim / 2.0)
