"""Periodic spectral calculus on [0, 2pi).

A field is stored as its Fourier coefficients c_k for |k| <= K and is
real-valued on the grid, which forces the Hermitian symmetry
c_{-k} = conj(c_k).  The synthesis convention is

    f(x_j) = sum_{|k| <= K} c_k e^{i k x_j},    x_j = 2 pi j / M.

All linear operations (derivatives, heat flow, the parametrix) act as
Fourier multipliers and are exact in the coefficients.  Quadratic
nonlinearities go through the grid; with K <= M/3 the grid product
truncated back to K equals the exact convolution truncated to K, so
floating point is the only error source.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from functools import cached_property, lru_cache

import numpy as np

from .errors import GridError, SymmetryError

_HERMITIAN_RTOL = 1e-8


@lru_cache(maxsize=None)
def _grid_tables(M: int, K: int):
    """Wavenumbers, spectrum slots and dyadic block indices for a grid."""
    k = np.arange(-K, K + 1)
    slots = np.mod(k, M)
    # Block -1 holds |k| <= 1, block j >= 0 holds 2^j < |k| <= 2^{j+1}.
    absk = np.abs(k)
    block = np.full(2 * K + 1, -1, dtype=int)
    nz = absk > 1
    block[nz] = np.ceil(np.log2(absk[nz])).astype(int) - 1
    return k, slots, block


@dataclass(frozen=True)
class PeriodicGrid:
    """Equispaced grid on [0, 2pi) with a retained spectral band.

    M: number of grid points (power of two).
    K: largest retained wavenumber; K <= M/3 keeps quadratic grid
       products alias-free in the retained band.
    """

    M: int
    K: int

    def __post_init__(self):
        if self.M < 4 or (self.M & (self.M - 1)) != 0:
            raise GridError(f"M={self.M} must be a power of two >= 4")
        if not (1 <= self.K <= self.M // 3):
            raise GridError(f"K={self.K} must satisfy 1 <= K <= M/3 = {self.M // 3}")

    @property
    def points(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.M) / self.M

    @property
    def dx(self) -> float:
        return 2.0 * np.pi / self.M

    @property
    def wavenumbers(self) -> np.ndarray:
        return _grid_tables(self.M, self.K)[0]

    @property
    def block_index(self) -> np.ndarray:
        """Dyadic block of each retained wavenumber (index -1, 0, 1, ...)."""
        return _grid_tables(self.M, self.K)[2]

    @property
    def max_block(self) -> int:
        return int(self.block_index.max())


def _symmetrize(coeffs: np.ndarray, K: int) -> np.ndarray:
    c = 0.5 * (coeffs + np.conj(coeffs[::-1]))
    c[K] = c[K].real + 0.0j
    return c


@dataclass(frozen=True)
class FourierField:
    """Real periodic function/distribution given by its Fourier coefficients."""

    grid: PeriodicGrid
    coeffs: np.ndarray = field(repr=False)

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=np.complex128)
        if c.shape != (2 * self.grid.K + 1,):
            raise GridError(
                f"coefficient array has shape {c.shape}, expected {(2 * self.grid.K + 1,)}"
            )
        scale = float(np.max(np.abs(c))) if c.size else 0.0
        if scale > 0.0:
            defect = float(np.max(np.abs(c - np.conj(c[::-1]))))
            if defect > _HERMITIAN_RTOL * scale:
                raise SymmetryError(
                    f"Hermitian symmetry violated: defect {defect:.3e} vs scale {scale:.3e}"
                )
        c = _symmetrize(c, self.grid.K)
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    # -- constructors ------------------------------------------------------

    @classmethod
    def zero(cls, grid: PeriodicGrid) -> "FourierField":
        return cls(grid, np.zeros(2 * grid.K + 1, dtype=np.complex128))

    @classmethod
    def constant(cls, grid: PeriodicGrid, value: float) -> "FourierField":
        c = np.zeros(2 * grid.K + 1, dtype=np.complex128)
        c[grid.K] = value
        return cls(grid, c)

    @classmethod
    def from_modes(cls, grid: PeriodicGrid, modes: dict[int, complex]) -> "FourierField":
        """Build from {k: c_k} for k >= 0; negative modes follow by symmetry."""
        c = np.zeros(2 * grid.K + 1, dtype=np.complex128)
        for k, a in modes.items():
            if abs(k) > grid.K:
                raise GridError(f"mode {k} outside retained band K={grid.K}")
            c[grid.K + k] = a
            c[grid.K - k] = np.conj(a)
        return cls(grid, c)

    @classmethod
    def from_values(cls, grid: PeriodicGrid, values: np.ndarray) -> "FourierField":
        """Analyse real grid values; modes beyond K are discarded."""
        v = np.asarray(values, dtype=np.float64)
        if v.shape != (grid.M,):
            raise GridError(f"value array has shape {v.shape}, expected {(grid.M,)}")
        spec = np.fft.fft(v) / grid.M
        _, slots, _ = _grid_tables(grid.M, grid.K)
        return cls(grid, spec[slots])

    @classmethod
    def from_function(cls, grid: PeriodicGrid, fn) -> "FourierField":
        return cls.from_values(grid, fn(grid.points))

    # -- synthesis ---------------------------------------------------------

    @cached_property
    def values(self) -> np.ndarray:
        """Real values on the grid points."""
        spec = np.zeros(self.grid.M, dtype=np.complex128)
        _, slots, _ = _grid_tables(self.grid.M, self.grid.K)
        np.add.at(spec, slots, self.coeffs)
        v = np.fft.ifft(spec) * self.grid.M
        v = v.real
        v.setflags(write=False)
        return v

    @cached_property
    def block_values(self) -> np.ndarray:
        """Grid values of every dyadic block; row j+1 holds block j.

        One batched transform serves the paraproduct machinery, which
        sums pointwise products of blocks.
        """
        M, K = self.grid.M, self.grid.K
        _, slots, block = _grid_tables(M, K)
        nb = self.grid.max_block + 2
        specs = np.zeros((nb, M), dtype=np.complex128)
        specs[block + 1, slots] = self.coeffs
        vals = (np.fft.ifft(specs, axis=1) * M).real
        vals.setflags(write=False)
        return vals

    def evaluate(self, x: np.ndarray, trim: float = 0.0) -> np.ndarray:
        """Evaluate the trigonometric polynomial at arbitrary real points.

        Uses a Horner recursion in z = e^{ix}; `trim` drops trailing modes
        whose magnitude is below trim * max|c| to shorten the recursion.
        """
        x = np.asarray(x, dtype=np.float64)
        K = self.grid.K
        pos = self.coeffs[K + 1 :]
        kmax = K
        if trim > 0.0 and pos.size:
            scale = float(np.max(np.abs(self.coeffs)))
            sig = np.nonzero(np.abs(pos) > trim * scale)[0]
            kmax = int(sig[-1]) + 1 if sig.size else 0
        z = np.exp(1j * x)
        acc = np.zeros_like(z)
        for k in range(kmax, 0, -1):
            acc = acc * z + pos[k - 1]
        return self.coeffs[K].real + 2.0 * (acc * z).real

    # -- algebra -----------------------------------------------------------

    def __add__(self, other: "FourierField") -> "FourierField":
        self._check_same_grid(other)
        return FourierField(self.grid, self.coeffs + other.coeffs)

    def __sub__(self, other: "FourierField") -> "FourierField":
        self._check_same_grid(other)
        return FourierField(self.grid, self.coeffs - other.coeffs)

    def __mul__(self, a: float) -> "FourierField":
        return FourierField(self.grid, self.coeffs * float(a))

    __rmul__ = __mul__

    def __neg__(self) -> "FourierField":
        return FourierField(self.grid, -self.coeffs)

    def _check_same_grid(self, other: "FourierField"):
        if self.grid != other.grid:
            raise GridError("fields live on different grids")

    # -- norms and inner products -------------------------------------------

    def l2_norm(self) -> float:
        """L2([0,2pi)) norm, exact from the coefficients (Parseval)."""
        return float(np.sqrt(2.0 * np.pi * np.sum(np.abs(self.coeffs) ** 2)))

    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values)))

    def sobolev_norm(self, s: float) -> float:
        """H^s norm via (1 + k^2)^{s/2} weights on the coefficients."""
        k = self.grid.wavenumbers
        w = (1.0 + k.astype(float) ** 2) ** s
        return float(np.sqrt(2.0 * np.pi * np.sum(w * np.abs(self.coeffs) ** 2)))

    def dot(self, other: "FourierField") -> float:
        """Inner product int f g dx."""
        self._check_same_grid(other)
        return float(np.real(2.0 * np.pi * np.sum(self.coeffs * np.conj(other.coeffs))))

    def mean(self) -> float:
        return float(self.coeffs[self.grid.K].real)

    # -- band surgery --------------------------------------------------------

    def lowpass(self, kmax: int) -> "FourierField":
        """Keep modes |k| <= kmax."""
        k = self.grid.wavenumbers
        c = np.where(np.abs(k) <= kmax, self.coeffs, 0.0)
        return FourierField(self.grid, c)

    def highpass(self, kmin: int) -> "FourierField":
        """Keep modes |k| > kmin."""
        k = self.grid.wavenumbers
        c = np.where(np.abs(k) > kmin, self.coeffs, 0.0)
        return FourierField(self.grid, c)

    def regrid(self, grid: PeriodicGrid) -> "FourierField":
        """Move to another grid; modes outside the new band must be absent."""
        K_old, K_new = self.grid.K, grid.K
        c = np.zeros(2 * K_new + 1, dtype=np.complex128)
        m = min(K_old, K_new)
        c[K_new - m : K_new + m + 1] = self.coeffs[K_old - m : K_old + m + 1]
        if K_old > K_new:
            tail = np.max(np.abs(self.coeffs[: K_old - K_new]))
            if tail > 0.0:
                raise GridError(
                    f"regrid would discard populated modes (tail magnitude {tail:.3e})"
                )
        return FourierField(grid, c)


# -- multipliers -------------------------------------------------------------


def apply_multiplier(f: FourierField, m) -> FourierField:
    """Apply a Fourier multiplier m(k); m must satisfy m(-k) = conj(m(k)).

    `m` may be a callable of the integer wavenumber or an array indexed
    like the coefficients.
    """
    k = f.grid.wavenumbers
    if callable(m):
        mk = np.asarray([m(int(kk)) for kk in k], dtype=np.complex128)
    else:
        mk = np.asarray(m, dtype=np.complex128)
        if mk.shape != f.coeffs.shape:
            raise GridError("multiplier array has wrong shape")
    defect = np.max(np.abs(mk - np.conj(mk[::-1])))
    scale = np.max(np.abs(mk)) or 1.0
    if defect > 1e-12 * scale:
        raise SymmetryError("multiplier is not Hermitian; field would not stay real")
    return FourierField(f.grid, mk * f.coeffs)


def laplacian_symbol(k: int) -> complex:
    return complex(-float(k) ** 2)


def derivative_symbol(k: int) -> complex:
    return 1j * float(k)


def heat_symbol(t: float):
    def m(k: int) -> complex:
        return complex(np.exp(-t * float(k) ** 2))

    return m


def parametrix_symbol(k: int) -> complex:
    """Symbol of the approximate inverse of the Laplacian.

    The sign is fixed so that the composition identity
    Laplacian o inverse = Id - e^{Laplacian} holds exactly as a
    multiplier identity: G(k) = -(1 - e^{-k^2})/k^2, G(0) = -1.
    """
    if k == 0:
        return complex(-1.0)
    return complex(-(1.0 - np.exp(-float(k) ** 2)) / float(k) ** 2)


def derivative(f: FourierField) -> FourierField:
    return apply_multiplier(f, derivative_symbol)


def laplacian(f: FourierField) -> FourierField:
    return apply_multiplier(f, laplacian_symbol)


def heat_flow(f: FourierField, t: float) -> FourierField:
    return apply_multiplier(f, heat_symbol(t))


def parametrix_inverse(f: FourierField) -> FourierField:
    return apply_multiplier(f, parametrix_symbol)


# -- dealiased products -------------------------------------------------------


def product(f: FourierField, g: FourierField) -> FourierField:
    """Dealiased pointwise product, truncated back to the retained band.

    For bandwidths within K <= M/3 this equals the exact convolution
    truncated to K.
    """
    f._check_same_grid(g)
    return FourierField.from_values(f.grid, f.values * g.values)


def convolution_truncated(f: FourierField, g: FourierField) -> FourierField:
    """Brute-force convolution truncated to the band; oracle for `product`."""
    f._check_same_grid(g)
    K = f.grid.K
    out = np.zeros(2 * K + 1, dtype=np.complex128)
    for k in range(-K, K + 1):
        s = 0.0 + 0.0j
        for l in range(max(-K, k - K), min(K, k + K) + 1):
            s += f.coeffs[K + l] * g.coeffs[K + k - l]
        out[K + k] = s
    return FourierField(f.grid, out)


# -- serialization ------------------------------------------------------------

_FIELD_MAGIC = b"BXF1"


def save_field(f: FourierField, path: str, seed_lineage: str = "") -> None:
    """Binary little-endian (re, im) float64 pairs for k = 0..K plus header.

    A JSON sidecar <path>.json records the grid and lineage; negative
    modes are implied by Hermitian symmetry.
    """
    K = f.grid.K
    half = f.coeffs[K:]
    buf = np.empty(2 * (K + 1), dtype="<f8")
    buf[0::2] = half.real
    buf[1::2] = half.imag
    with open(path, "wb") as fh:
        fh.write(_FIELD_MAGIC)
        fh.write(struct.pack("<qq", f.grid.M, K))
        fh.write(buf.tobytes())
    sidecar = {
        "schema": "broxdiff.field/1",
        "M": f.grid.M,
        "K": K,
        "seed_lineage": seed_lineage,
    }
    with open(path + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)


def load_field(path: str) -> FourierField:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _FIELD_MAGIC:
            raise GridError(f"not a field file: {path}")
        M, K = struct.unpack("<qq", fh.read(16))
        buf = np.frombuffer(fh.read(), dtype="<f8")
    half = buf[0::2] + 1j * buf[1::2]
    c = np.empty(2 * K + 1, dtype=np.complex128)
    c[K:] = half
    c[:K] = np.conj(half[1:][::-1])
    return FourierField(PeriodicGrid(int(M), int(K)), c)


def export_grid_csv(f: FourierField, path: str) -> None:
    """CSV of (x_j, f(x_j))."""
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "f"])
        for x, v in zip(f.grid.points, f.values):
            w.writerow([repr(float(x)), repr(float(v))])
