"""Gauss-Legendre grids, spherical-harmonic transforms and power spectra.

Coefficients use the orthonormal basis on the unit sphere (total measure
4*pi) without the Condon-Shortley phase. Only m >= 0 is stored; the m > 0
coefficients are stored multiplied by sqrt(2) so that the plain sum of
squared stored reals equals the quadrature-weighted grid norm. With that
scaling the per-degree power

    P_l = sum_{c in (re, im)} sum_{m=0..l} x_{c,l,m}^2

partitions the squared norm exactly, and the (0, 0) coefficient of a
constant field c is c * sqrt(4 pi).

The module also carries the 1-D periodic ring analog (``RingGrid``) used by
the Lorenz-96 experiments, with the same conventions: unit weight per site
and a real Fourier basis scaled so that Parseval holds without factors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

SQRT2 = np.sqrt(2.0)


class GridTooCoarseError(ValueError):
    pass


class TruncationError(ValueError):
    pass


def gauss_legendre_nodes(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Return the ``n`` Gauss-Legendre nodes (descending) and weights."""
    if n < 1:
        raise ValueError(f"need at least one node, got {n}")
    nodes, weights = np.polynomial.legendre.leggauss(n)
    return nodes[::-1].copy(), weights[::-1].copy()


def dof_count(T: int) -> int:
    """Number of complex coefficients (l, m), 0 <= m <= l <= T."""
    if T < 0:
        raise ValueError(f"truncation must be non-negative, got {T}")
    return (T + 1) * (T + 2) // 2


def coeff_index(l: int, m: int) -> int:
    return l * (l + 1) // 2 + m


@lru_cache(maxsize=None)
def _lm_arrays(T: int) -> tuple[np.ndarray, np.ndarray]:
    ls = np.concatenate([np.full(l + 1, l) for l in range(T + 1)])
    ms = np.concatenate([np.arange(l + 1) for l in range(T + 1)])
    return ls, ms


def degrees(T: int) -> np.ndarray:
    """Total degree l of each stored coefficient."""
    return _lm_arrays(T)[0]


def orders(T: int) -> np.ndarray:
    """Zonal order m of each stored coefficient."""
    return _lm_arrays(T)[1]


def legendre_table(T: int, mu: np.ndarray) -> np.ndarray:
    """Normalized associated Legendre functions at ``mu``.

    Returns an array of shape (dof_count(T), len(mu)) holding
    Pbar_lm(mu) with 2*pi * int_{-1}^{1} Pbar_lm^2 dmu = 1, computed by the
    standard three-term recurrence in l at fixed m.
    """
    mu = np.asarray(mu, dtype=float)
    out = np.zeros((dof_count(T), mu.size))
    sin_theta = np.sqrt(np.clip(1.0 - mu**2, 0.0, None))
    pmm = np.full(mu.size, 1.0 / np.sqrt(4.0 * np.pi))
    for m in range(T + 1):
        if m > 0:
            pmm = np.sqrt((2.0 * m + 1.0) / (2.0 * m)) * sin_theta * pmm
        out[coeff_index(m, m)] = pmm
        if m + 1 <= T:
            out[coeff_index(m + 1, m)] = np.sqrt(2.0 * m + 3.0) * mu * pmm
        for l in range(m + 2, T + 1):
            a = np.sqrt((4.0 * l * l - 1.0) / (l * l - m * m))
            b = np.sqrt(((l - 1.0) ** 2 - m * m) / (4.0 * (l - 1.0) ** 2 - 1.0))
            out[coeff_index(l, m)] = a * (mu * out[coeff_index(l - 1, m)] - b * out[coeff_index(l - 2, m)])
    return out


@dataclass(frozen=True, eq=False)
class GaussGrid:
    """Rectangular Gauss-Legendre grid.

    ``latitudes`` holds the sine of latitude at each node, descending.
    """

    nlat: int
    nlon: int
    latitudes: np.ndarray = field(init=False, repr=False)
    weights: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.nlat < 1 or self.nlon < 1:
            raise ValueError(f"grid dimensions must be positive, got {self.nlat}x{self.nlon}")
        mu, w = gauss_legendre_nodes(self.nlat)
        object.__setattr__(self, "latitudes", mu)
        object.__setattr__(self, "weights", w)

    @classmethod
    def for_truncation(cls, T: int) -> "GaussGrid":
        """Smallest grid that represents a T-truncated field exactly."""
        return cls(T + 1, 2 * T + 1)

    @property
    def longitudes(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.nlon) / self.nlon

    @property
    def lat_radians(self) -> np.ndarray:
        return np.arcsin(self.latitudes)

    @property
    def cell_weights(self) -> np.ndarray:
        """Quadrature weight of each node, shape (nlat, nlon); sums to 4 pi."""
        return np.repeat(self.weights[:, None] * (2.0 * np.pi / self.nlon), self.nlon, axis=1)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nlat, self.nlon)

    def __eq__(self, other):
        return isinstance(other, GaussGrid) and (self.nlat, self.nlon) == (other.nlat, other.nlon)

    def __hash__(self):
        return hash((self.nlat, self.nlon))


@dataclass(frozen=True, eq=False)
class RingGrid:
    """Periodic 1-D ring of ``n`` sites, unit weight per site.

    Stored as a grid with ``nlat == 1`` so the same field container and file
    format serve both geometries.
    """

    n: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"ring needs at least one site, got {self.n}")

    nlat = 1

    @property
    def nlon(self) -> int:
        return self.n

    @property
    def weights(self) -> np.ndarray:
        return np.ones(1)

    @property
    def cell_weights(self) -> np.ndarray:
        return np.ones((1, self.n))

    @property
    def shape(self) -> tuple[int, int]:
        return (1, self.n)

    @property
    def max_wavenumber(self) -> int:
        return self.n // 2

    def __eq__(self, other):
        return isinstance(other, RingGrid) and self.n == other.n

    def __hash__(self):
        return hash(("ring", self.n))


@dataclass
class GridField:
    grid: GaussGrid | RingGrid
    values: np.ndarray
    names: tuple[str, ...] = ()

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim == 2:
            self.values = self.values[None]
        if self.values.shape[1:] != self.grid.shape:
            raise ValueError(f"values shape {self.values.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid field contains non-finite values")
        if not self.names:
            self.names = tuple(f"var{k}" for k in range(self.nvar))
        elif len(self.names) != self.nvar:
            raise ValueError(f"{len(self.names)} names for {self.nvar} variables")
        self.names = tuple(self.names)

    @property
    def nvar(self) -> int:
        return self.values.shape[0]


@dataclass
class SpectralField:
    """Triangular-truncation coefficients, shape (nvar, dof_count(T)) complex.

    ``basis`` is ``"sphere"`` for spherical harmonics (index l*(l+1)/2 + m)
    or ``"ring"`` for ring Fourier modes (index k, 0 <= k <= T).
    """

    truncation: int
    coeffs: np.ndarray
    names: tuple[str, ...] = ()
    basis: str = "sphere"

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=complex)
        if self.coeffs.ndim == 1:
            self.coeffs = self.coeffs[None]
        if self.basis not in ("sphere", "ring"):
            raise ValueError(f"unknown basis {self.basis!r}")
        expected = self.ncoef_for(self.truncation, self.basis)
        if self.coeffs.shape[1] != expected:
            raise ValueError(f"expected {expected} coefficients per variable at T={self.truncation}, "
                             f"got {self.coeffs.shape[1]}")
        if not self.names:
            self.names = tuple(f"var{k}" for k in range(self.nvar))
        self.names = tuple(self.names)

    @staticmethod
    def ncoef_for(T: int, basis: str) -> int:
        return dof_count(T) if basis == "sphere" else T + 1

    @property
    def nvar(self) -> int:
        return self.coeffs.shape[0]

    @property
    def degrees(self) -> np.ndarray:
        if self.basis == "sphere":
            return degrees(self.truncation)
        return np.arange(self.truncation + 1)

    def as_reals(self) -> np.ndarray:
        """Coefficients as (nvar, 2 * ncoef) reals, re/im interleaved."""
        return self.coeffs.view(float).reshape(self.nvar, -1).copy()

    @property
    def mean_coefficient(self) -> np.ndarray:
        """Signed (0, 0) coefficient per variable."""
        return self.coeffs[:, 0].real.copy()


def _check_resolution(grid: GaussGrid, T: int):
    if T < 0:
        raise TruncationError(f"truncation must be non-negative, got {T}")
    if grid.nlat < T + 1 or grid.nlon < 2 * T + 1:
        raise GridTooCoarseError(
            f"{grid.nlat}x{grid.nlon} grid cannot carry T{T}: need nlat >= {T + 1} and nlon >= {2 * T + 1}")


@lru_cache(maxsize=32)
def _cached_table(T: int, nlat: int) -> np.ndarray:
    table = legendre_table(T, gauss_legendre_nodes(nlat)[0])
    table.setflags(write=False)
    return table


def sh_analysis(field: GridField, T: int) -> SpectralField:
    """Project a grid field onto spherical harmonics up to degree ``T``."""
    grid = field.grid
    if not isinstance(grid, GaussGrid):
        raise TypeError("sh_analysis needs a GaussGrid field; use ring_analysis for rings")
    _check_resolution(grid, T)
    table = _cached_table(T, grid.nlat)
    fourier = np.fft.fft(field.values, axis=-1)[..., : T + 1] * (2.0 * np.pi / grid.nlon)
    ms = orders(T)
    # (nvar, nlat, ncoef) gather of the zonal order of each coefficient
    per_coef = fourier[:, :, ms]
    coeffs = np.einsum("i,ci,vic->vc", grid.weights, table, per_coef)
    coeffs[:, ms > 0] *= SQRT2
    coeffs[:, ms == 0] = coeffs[:, ms == 0].real
    return SpectralField(T, coeffs, field.names, "sphere")


def sh_synthesis(spec: SpectralField, grid: GaussGrid) -> GridField:
    """Evaluate a truncated spherical-harmonic series on ``grid``."""
    if spec.basis != "sphere":
        raise TypeError("sh_synthesis needs spherical coefficients")
    T = spec.truncation
    _check_resolution(grid, T)
    table = _cached_table(T, grid.nlat)
    ms = orders(T)
    scaled = spec.coeffs.copy()
    scaled[:, ms == 0] = scaled[:, ms == 0].real
    scaled[:, ms > 0] /= SQRT2
    half = np.zeros((spec.nvar, grid.nlat, grid.nlon // 2 + 1), dtype=complex)
    contrib = scaled[:, None, :] * table.T[None]
    for m in range(T + 1):
        half[:, :, m] = contrib[:, :, ms == m].sum(axis=-1)
    values = np.fft.irfft(half, n=grid.nlon, axis=-1) * grid.nlon
    return GridField(grid, values, spec.names)


def truncate(spec: SpectralField, T_low: int) -> SpectralField:
    """Keep only the coefficients of degree <= ``T_low``."""
    if T_low > spec.truncation:
        raise TruncationError(f"cannot raise truncation from T{spec.truncation} to T{T_low}")
    if T_low < 0:
        raise TruncationError(f"truncation must be non-negative, got {T_low}")
    n = SpectralField.ncoef_for(T_low, spec.basis)
    # both layouts order coefficients by increasing degree
    return SpectralField(T_low, spec.coeffs[:, :n].copy(), spec.names, spec.basis)


def power_spectrum(spec: SpectralField, var: int = 0) -> np.ndarray:
    """Per-degree power P_0..P_T of variable ``var``."""
    if not 0 <= var < spec.nvar:
        raise IndexError(f"variable {var} out of range for {spec.nvar} variables")
    sq = np.abs(spec.coeffs[var]) ** 2
    return np.bincount(spec.degrees, weights=sq, minlength=spec.truncation + 1)


def weighted_sq_norm(field: GridField, var_subset=None) -> float:
    """Quadrature-weighted squared norm, summed over ``var_subset``."""
    values = field.values if var_subset is None else field.values[list(np.atleast_1d(var_subset))]
    return float(np.sum(field.grid.cell_weights * values**2))


def weighted_mean_variance(field: GridField, var: int = 0) -> tuple[float, float]:
    """Spatial mean and (unnormalized) weighted variance of one variable.

    The variance is sum_i w_i (x_i - mean)^2 over the grid measure, the
    quantity that equals sum_{l >= 1} P_l.
    """
    w = field.grid.cell_weights
    x = field.values[var]
    mean = float(np.sum(w * x) / np.sum(w))
    return mean, float(np.sum(w * (x - mean) ** 2))


# ---------------------------------------------------------------------------
# ring Fourier backend
# ---------------------------------------------------------------------------


def _ring_scale(n: int, K: int) -> np.ndarray:
    scale = np.full(K + 1, SQRT2 / np.sqrt(n))
    scale[0] = 1.0 / np.sqrt(n)
    if n % 2 == 0 and K == n // 2:
        scale[K] = 1.0 / np.sqrt(n)
    return scale


def ring_analysis(field: GridField, K: int | None = None) -> SpectralField:
    """Real Fourier coefficients of ring data up to wavenumber ``K``."""
    grid = field.grid
    if not isinstance(grid, RingGrid):
        raise TypeError("ring_analysis needs a RingGrid field")
    K = grid.max_wavenumber if K is None else K
    if not 0 <= K <= grid.max_wavenumber:
        raise GridTooCoarseError(f"ring of {grid.n} sites carries wavenumbers up to {grid.max_wavenumber}, asked {K}")
    coeffs = np.fft.rfft(field.values[:, 0, :], axis=-1)[:, : K + 1] * _ring_scale(grid.n, K)
    coeffs[:, 0] = coeffs[:, 0].real
    if grid.n % 2 == 0 and K == grid.max_wavenumber:
        coeffs[:, K] = coeffs[:, K].real
    return SpectralField(K, coeffs, field.names, "ring")


def ring_synthesis(spec: SpectralField, grid: RingGrid) -> GridField:
    if spec.basis != "ring":
        raise TypeError("ring_synthesis needs ring coefficients")
    K = spec.truncation
    if K > grid.max_wavenumber:
        raise GridTooCoarseError(f"ring of {grid.n} sites cannot carry wavenumber {K}")
    half = np.zeros((spec.nvar, grid.n // 2 + 1), dtype=complex)
    half[:, : K + 1] = spec.coeffs / _ring_scale(grid.n, K)
    values = np.fft.irfft(half, n=grid.n, axis=-1)
    return GridField(grid, values[:, None, :], spec.names)


def ring_truncate_values(values: np.ndarray, K: int) -> np.ndarray:
    """Low-pass ring data (last axis = sites) to wavenumbers <= ``K``."""
    n = values.shape[-1]
    spec = np.fft.rfft(values, axis=-1)
    spec[..., K + 1:] = 0.0
    return np.fft.irfft(spec, n=n, axis=-1)


def ring_power(values: np.ndarray) -> np.ndarray:
    """Per-wavenumber power of ring data along the last axis.

    Sums to ``sum(values**2)`` over the last axis.
    """
    n = values.shape[-1]
    X = np.fft.rfft(values, axis=-1)
    power = 2.0 * np.abs(X) ** 2 / n
    power[..., 0] /= 2.0
    if n % 2 == 0:
        power[..., -1] /= 2.0
    return power
