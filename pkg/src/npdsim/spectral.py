"""Fourier machinery for periodic scalar and vector fields on [0, 2pi]^d.

Convention used everywhere in this package:

    f(x) = sum_k fhat(k) exp(i k.x),   k integer wavevectors,

so Parseval reads ||f||_L2^2 = (2pi)^d sum_k |fhat(k)|^2 and the smallest
nonzero |k|^2 (the spectral gap of -Laplacian) equals 1.  Physical fields are
plain real ndarrays on the collocation grid, spectral fields are complex
ndarrays of the same shape; the grid object carries the wavenumber lattice,
the 2/3-rule dealias mask and all modewise operators.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import scipy.fft as _fft

TWO_PI = 2.0 * np.pi


class NonNeutralSource(Exception):
    """Right-hand side of the periodic Poisson problem has a nonzero mean."""


def _workers() -> int:
    # NPD_THREADS caps the FFT worker threads; default single-threaded for
    # bit-reproducible output.
    return max(1, int(os.environ.get("NPD_THREADS", "1")))


@dataclass(frozen=True)
class SpectralGrid:
    """Collocation grid and integer wavenumber lattice for [0, 2pi]^dim."""

    dim: int
    n: int
    k: tuple
    k_sq: np.ndarray
    k_sq_safe: np.ndarray
    dealias_cutoff: int
    dealias_mask: np.ndarray

    @property
    def shape(self) -> tuple:
        return (self.n,) * self.dim

    @property
    def n_points(self) -> int:
        return self.n**self.dim

    @property
    def volume(self) -> float:
        return TWO_PI**self.dim

    @property
    def cell_volume(self) -> float:
        return (TWO_PI / self.n) ** self.dim

    @property
    def spacing(self) -> float:
        return TWO_PI / self.n

    def axes(self):
        """Physical coordinate arrays, meshed with 'ij' indexing."""
        x = np.arange(self.n) * self.spacing
        return np.meshgrid(*([x] * self.dim), indexing="ij")

    # -- transforms -------------------------------------------------------

    def forward(self, values: np.ndarray) -> np.ndarray:
        """Physical -> spectral; fhat(k) as in f = sum_k fhat(k) e^{ik.x}."""
        return _fft.fftn(values, workers=_workers()) / self.n_points

    def inverse(self, coeffs: np.ndarray) -> np.ndarray:
        """Spectral -> physical, returning the real part."""
        return np.real(_fft.ifftn(coeffs, workers=_workers())) * self.n_points

    # -- modewise operators ------------------------------------------------

    def gradient(self, fhat: np.ndarray) -> list:
        return [1j * kj * fhat for kj in self.k]

    def divergence(self, vhat: list) -> np.ndarray:
        out = 1j * self.k[0] * vhat[0]
        for kj, vj in zip(self.k[1:], vhat[1:]):
            out += 1j * kj * vj
        return out

    def laplacian(self, fhat: np.ndarray) -> np.ndarray:
        return -self.k_sq * fhat

    def inverse_laplacian(self, fhat: np.ndarray) -> np.ndarray:
        """Solve -lap(u) = f with the zero-mean gauge uhat(0) = 0.

        The source must be mean-free: |fhat(0)| <= 1e-10 * ||f||_L2, else
        NonNeutralSource is raised.
        """
        origin = (0,) * self.dim
        mean_amp = abs(fhat[origin])
        if mean_amp > 1e-10 * self.l2_norm_spectral(fhat):
            raise NonNeutralSource(
                f"Poisson source has mean amplitude {mean_amp:.3e}; "
                "the periodic problem is only solvable for mean-free sources"
            )
        out = fhat / self.k_sq_safe
        out[origin] = 0.0
        return out

    def dealias(self, fhat: np.ndarray) -> np.ndarray:
        """Zero every mode with any |k_j| > floor(n/3) (2/3 rule)."""
        return fhat * self.dealias_mask

    # -- norms and inner products -------------------------------------------

    def l2_norm_spectral(self, fhat: np.ndarray) -> float:
        return float(np.sqrt(self.volume * np.sum(np.abs(fhat) ** 2)))

    def sobolev_norm(self, fhat: np.ndarray, s: float, homogeneous: bool = True) -> float:
        """Spectral H^s (semi)norm.

        homogeneous=True gives ((2pi)^d sum |k|^{2s} |fhat|^2)^{1/2}; the full
        norm uses the multiplier (1+|k|^2)^s.  s=0 homogeneous reduces to L2.
        """
        if s < 0:
            raise ValueError("s must be nonnegative")
        mult = self.k_sq**s if homogeneous else (1.0 + self.k_sq) ** s
        return float(np.sqrt(self.volume * np.sum(mult * np.abs(fhat) ** 2)))

    def v_inner(self, a_hats: list, b_hats: list) -> float:
        """H1-weighted inner product of species tuples: sum_i sum_k (1+|k|^2) Re(a conj(b))."""
        if len(a_hats) != len(b_hats):
            raise ValueError("species tuples must have equal length")
        w = 1.0 + self.k_sq
        acc = 0.0
        for a, b in zip(a_hats, b_hats):
            acc += np.sum(w * np.real(a * np.conj(b)))
        return float(self.volume * acc)

    def v_norm(self, hats: list) -> float:
        return float(np.sqrt(max(self.v_inner(hats, hats), 0.0)))

    # -- physical-space quadrature ------------------------------------------

    def integral(self, values: np.ndarray) -> float:
        return float(self.cell_volume * np.sum(values))

    def mean(self, values: np.ndarray) -> float:
        return float(np.mean(values))

    def lp_norm(self, values: np.ndarray, p: float) -> float:
        if p <= 0:
            raise ValueError("p must be positive")
        return float((self.cell_volume * np.sum(np.abs(values) ** p)) ** (1.0 / p))

    def l2_norm(self, values: np.ndarray) -> float:
        return self.lp_norm(values, 2)

    # -- band-limited helpers -------------------------------------------------

    def band_mask(self, k_max: float, include_mean: bool = False) -> np.ndarray:
        """Mask keeping modes with |k| <= k_max (Euclidean), mean excluded by default."""
        mask = self.k_sq <= float(k_max) ** 2 + 1e-12
        if not include_mean:
            mask = mask & (self.k_sq > 0)
        return mask


def make_grid(dim: int, n_per_axis: int) -> SpectralGrid:
    """Build the torus grid; n_per_axis must be a power of two >= 8, dim in {2,3}."""
    if dim not in (2, 3):
        raise ValueError(f"dim must be 2 or 3, got {dim}")
    n = int(n_per_axis)
    if n < 8 or (n & (n - 1)) != 0:
        raise ValueError(f"n_per_axis must be a power of two >= 8, got {n_per_axis}")
    k1 = np.fft.fftfreq(n, d=1.0 / n)  # integers 0..n/2-1, -n/2..-1
    k = tuple(np.meshgrid(*([k1] * dim), indexing="ij"))
    k_sq = sum(kj**2 for kj in k)
    k_sq_safe = k_sq.copy()
    k_sq_safe[(0,) * dim] = 1.0
    cutoff = n // 3
    mask = np.ones((n,) * dim, dtype=bool)
    for kj in k:
        mask &= np.abs(kj) <= cutoff
    return SpectralGrid(
        dim=dim,
        n=n,
        k=k,
        k_sq=k_sq,
        k_sq_safe=k_sq_safe,
        dealias_cutoff=cutoff,
        dealias_mask=mask.astype(float),
    )


def resample(values: np.ndarray, grid_src: SpectralGrid, grid_dst: SpectralGrid) -> np.ndarray:
    """Exact trigonometric interpolation of a field onto a finer grid.

    Zero-pads the spectrum; exact for fields with no Nyquist content, which
    holds for anything dealiased or band-limited below n/2.
    """
    if grid_dst.n < grid_src.n or grid_dst.dim != grid_src.dim:
        raise ValueError("resample only upsamples between grids of equal dim")
    if grid_dst.n == grid_src.n:
        return values.copy()
    fhat = grid_src.forward(values)
    half = grid_src.n // 2
    src_idx = np.r_[0:half, grid_src.n - half : grid_src.n]
    dst_idx = np.r_[0:half, grid_dst.n - half : grid_dst.n]
    out = np.zeros(grid_dst.shape, dtype=complex)
    out[np.ix_(*([dst_idx] * grid_dst.dim))] = fhat[np.ix_(*([src_idx] * grid_src.dim))]
    return grid_dst.inverse(out)


def random_band_limited(
    grid: SpectralGrid, k_max: float, rng: np.random.Generator, normalize_sup: bool = True
) -> np.ndarray:
    """Seeded mean-free random field supported on |k| <= k_max, sup-normalized."""
    white = rng.standard_normal(grid.shape)
    fhat = grid.forward(white) * grid.band_mask(k_max)
    g = grid.inverse(fhat)
    if normalize_sup:
        sup = np.max(np.abs(g))
        if sup == 0.0:
            raise ValueError("band mask produced an identically zero field")
        g = g / sup
    return g
