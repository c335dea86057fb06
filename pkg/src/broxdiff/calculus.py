"""Bony paraproducts, correctors, and the paracontrolled domain maps.

The paraproduct pair splits a product into low-high, resonant and
high-low parts,

    f g = P_f g + Pi(f, g) + P_g f,

with P_f g summing block pairs l < l' - 1 and Pi the pairs |l - l'| <= 1.
Every pairwise product is dealiased, so the decomposition is exact in the
coefficients.

The intertwined paraproduct acts through the source of its second
argument: for X = -2 G S (G the parametrix multiplier),

    Pt_a X := -2 G (P_a S),

which makes the Laplacian cancellation

    (1/2) Lap Pt_a X + P_a S - e^{Lap} P_a S = 0

an exact multiplier identity.  This is the cancellation the whole domain
parametrization is built on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable

import numpy as np

from .errors import ContractionError, GridError, LevelError
from .fields import (
    FourierField,
    PeriodicGrid,
    derivative,
    heat_flow,
    laplacian,
    parametrix_inverse,
    product,
)

if TYPE_CHECKING:  # pragma: no cover
    from .noise import EnhancedNoise

# Probe seeds shipped with the repo; fixed so operator-norm proxies and
# contraction thresholds are reproducible.
PROBE_SEEDS = (
    101, 211, 307, 401, 503,
    601, 701, 809, 907, 1009,
    1103, 1201, 1301, 1409, 1511,
    1601, 1709, 1801, 1901, 2003,
)


def para(f: FourierField, g: FourierField) -> FourierField:
    """Low-high paraproduct P_f g = sum_{l < l'-1} D_l f D_{l'} g."""
    f._check_same_grid(g)
    bf = f.block_values
    bg = g.block_values
    # cum[i] = grid values of blocks <= i - 1 of f
    cum = np.cumsum(bf, axis=0)
    out = np.zeros(f.grid.M)
    for jp in range(1, f.grid.max_block + 1):
        out += cum[jp - 1] * bg[jp + 1]
    return FourierField.from_values(f.grid, out)


def resonant(f: FourierField, g: FourierField) -> FourierField:
    """Resonant product Pi(f, g) = sum_{|l - l'| <= 1} D_l f D_{l'} g."""
    f._check_same_grid(g)
    bf = f.block_values
    bg = g.block_values
    pad = np.zeros((1, f.grid.M))
    ng = np.concatenate([pad, bg, pad], axis=0)
    out = np.zeros(f.grid.M)
    for j in range(-1, f.grid.max_block + 1):
        out += bf[j + 1] * (ng[j + 1] + ng[j + 2] + ng[j + 3])
    return FourierField.from_values(f.grid, out)


def bony_defect(f: FourierField, g: FourierField) -> float:
    """Max coefficient error of P_f g + Pi(f,g) + P_g f against f*g."""
    total = para(f, g) + resonant(f, g) + para(g, f)
    return float(np.max(np.abs(total.coeffs - product(f, g).coeffs)))


@dataclass(frozen=True)
class SourcedField:
    """A field carrying the source it was solved from: value = -2 G(source).

    Keeping the source makes the intertwined paraproduct exactly
    computable, and band surgery on the source is how reference-level
    tails are formed.
    """

    value: FourierField
    source: FourierField

    def __post_init__(self):
        self.value._check_same_grid(self.source)

    @classmethod
    def from_source(cls, source: FourierField) -> "SourcedField":
        return cls(value=-2.0 * parametrix_inverse(source), source=source)

    def residual(self) -> float:
        """Defect of value + 2 G(source) = 0."""
        r = self.value + 2.0 * parametrix_inverse(self.source)
        return float(np.max(np.abs(r.coeffs)))

    def source_tail(self, N: int) -> "SourcedField":
        """Restrict the source to modes |k| > N and re-solve."""
        return SourcedField.from_source(self.source.highpass(N))

    def grad(self) -> "SourcedField":
        """Derivative commutes with the parametrix, so the source follows."""
        return SourcedField(value=derivative(self.value), source=derivative(self.source))


def para_tilde(a: FourierField, X: SourcedField) -> FourierField:
    """Intertwined paraproduct Pt_a X = -2 G (P_a S)."""
    return -2.0 * parametrix_inverse(para(a, X.source))


def intertwine_defect(a: FourierField, X: SourcedField) -> float:
    """Defect of (1/2) Lap Pt_a X + P_a S - e^{Lap} P_a S = 0."""
    ps = para(a, X.source)
    r = 0.5 * laplacian(para_tilde(a, X)) + ps - heat_flow(ps, 1.0)
    return float(np.max(np.abs(r.coeffs)))


def corrector_cnabla(a: FourierField, X: SourcedField, b: FourierField) -> FourierField:
    """C_nabla(a, X, b) = Pi(grad Pt_a X, b) - a * Pi(grad X, b)."""
    first = resonant(derivative(para_tilde(a, X)), b)
    second = product(a, resonant(derivative(X.value), b))
    return first - second


def corrector_s(a: FourierField, X: SourcedField, b: FourierField) -> FourierField:
    """S(a, X, b) = P_b Pt_a X - P_a P_b X."""
    return para(b, para_tilde(a, X)) - para(a, para(b, X.value))


def corrector_s_grad(a: FourierField, X: SourcedField, b: FourierField) -> FourierField:
    """Gradient form P_b grad Pt_a X - P_a P_b grad X.

    This is the variant the generator assembly consumes: it absorbs the
    commutator between the gradient and the intertwined paraproduct, so
    the expanded operator stays exact at finite truncation.
    """
    first = para(b, derivative(para_tilde(a, X)))
    second = para(a, para(b, derivative(X.value)))
    return first - second


# -- the domain parametrization ------------------------------------------------


@dataclass(frozen=True)
class ParacontrolledFunction:
    """Pair (u, u_sharp) with u = Pt_{grad u} T1 + Pt_{grad u} T2 + u_sharp.

    T1, T2 are the reference-level tails of the enhanced noise carried by
    `noise`; the pair is stored exactly consistent: u_sharp is recomputed
    from u after the fixed point converges.
    """

    u: FourierField
    u_sharp: FourierField
    N: int
    noise: "EnhancedNoise"

    def fixed_point_residual(self) -> float:
        """H^1 defect of the defining decomposition."""
        return (self.u_sharp - phi_map(self.u, self.noise, self.N)).sobolev_norm(1.0)


def reference_tails(Xi: "EnhancedNoise", N: int) -> tuple[SourcedField, SourcedField]:
    """Tails X_i - X_i^{(N)}, realized by zeroing source modes |k| <= N."""
    if N < 0:
        raise LevelError(f"reference level must be >= 0, got {N}")
    if N > Xi.n:
        raise LevelError(f"reference level {N} exceeds noise level {Xi.n}")
    return Xi.X1.source_tail(N), Xi.X2.source_tail(N)


def phi_map(u: FourierField, Xi: "EnhancedNoise", N: int) -> FourierField:
    """u_sharp = u - Pt_{grad u}(X1 tail) - Pt_{grad u}(X2 tail)."""
    T1, T2 = reference_tails(Xi, N)
    gu = derivative(u)
    return u - para_tilde(gu, T1) - para_tilde(gu, T2)


def phi_band_map(u: FourierField, Xi: "EnhancedNoise", N: int, n: int) -> FourierField:
    """Banded variant using source modes N < |k| <= n (regularized domain)."""
    if n < N:
        raise LevelError(f"band requires n >= N, got n={n} N={N}")
    T1 = SourcedField.from_source(Xi.X1.source.highpass(N).lowpass(n))
    T2 = SourcedField.from_source(Xi.X2.source.highpass(N).lowpass(n))
    gu = derivative(u)
    return u - para_tilde(gu, T1) - para_tilde(gu, T2)


def _gamma_iterate(
    u_sharp: FourierField,
    T1: SourcedField,
    T2: SourcedField,
    tol: float,
    maxiter: int,
) -> FourierField:
    u = u_sharp
    prev_diff = np.inf
    growth = 0
    for _ in range(maxiter):
        gu = derivative(u)
        u_next = u_sharp + para_tilde(gu, T1) + para_tilde(gu, T2)
        diff = (u_next - u).sobolev_norm(1.0)
        u = u_next
        if diff <= tol:
            return u
        if diff > prev_diff:
            growth += 1
            if growth >= 3 and diff > 10.0 * tol:
                raise ContractionError(
                    "fixed point diverges; increase the reference level N"
                )
        else:
            growth = 0
        prev_diff = diff
    raise ContractionError(
        f"fixed point did not reach tol={tol:.1e} in {maxiter} iterations; "
        "increase the reference level N"
    )


def gamma_map(
    u_sharp: FourierField,
    Xi: "EnhancedNoise",
    N: int,
    tol: float = 1e-11,
    maxiter: int = 200,
) -> ParacontrolledFunction:
    """Invert the remainder map by fixed point from u^0 = u_sharp.

    Returns the pair (u, Phi(u)); the stored remainder is recomputed from
    the converged iterate so the decomposition holds to machine precision.
    """
    T1, T2 = reference_tails(Xi, N)
    scale = max(1.0, u_sharp.sobolev_norm(1.0))
    u = _gamma_iterate(u_sharp, T1, T2, tol * scale, maxiter)
    gu = derivative(u)
    sharp = u - para_tilde(gu, T1) - para_tilde(gu, T2)
    return ParacontrolledFunction(u=u, u_sharp=sharp, N=N, noise=Xi)


def gamma_band_map(
    u_sharp: FourierField,
    Xi: "EnhancedNoise",
    N: int,
    n: int,
    tol: float = 1e-11,
    maxiter: int = 200,
) -> ParacontrolledFunction:
    """Banded inverse (source modes N < |k| <= n); converges to the full
    map as n grows."""
    if n < N:
        raise LevelError(f"band requires n >= N, got n={n} N={N}")
    T1 = SourcedField.from_source(Xi.X1.source.highpass(N).lowpass(n))
    T2 = SourcedField.from_source(Xi.X2.source.highpass(N).lowpass(n))
    scale = max(1.0, u_sharp.sobolev_norm(1.0))
    u = _gamma_iterate(u_sharp, T1, T2, tol * scale, maxiter)
    gu = derivative(u)
    sharp = u - para_tilde(gu, T1) - para_tilde(gu, T2)
    return ParacontrolledFunction(u=u, u_sharp=sharp, N=N, noise=Xi)


def probe_field(
    grid: PeriodicGrid, seed: int, kmax: int = 32, decay: float = 2.0
) -> FourierField:
    """Seeded probe with coefficients k^{-decay} times unit Gaussians."""
    kmax = min(kmax, grid.K)
    rng = np.random.Generator(np.random.Philox(key=seed))
    g = rng.standard_normal(2 * kmax).view(np.complex128)
    c = np.zeros(2 * grid.K + 1, dtype=np.complex128)
    ks = np.arange(1, kmax + 1, dtype=float)
    c[grid.K + 1 : grid.K + kmax + 1] = g / np.sqrt(2.0) / ks**decay
    c[: grid.K] = np.conj(c[grid.K + 1 :][::-1])
    return FourierField(grid, c)


def probe_set(
    grid: PeriodicGrid, count: int = 20, kmax: int = 32, decay: float = 2.0
) -> list[FourierField]:
    return [probe_field(grid, s, kmax, decay) for s in PROBE_SEEDS[:count]]


def perturbation_ratio(Xi: "EnhancedNoise", N: int, probes=None) -> float:
    """Measured Lipschitz ratio of u -> u - Phi(u) on the probe set, in H^1."""
    if probes is None:
        probes = probe_set(Xi.grid)
    T1, T2 = reference_tails(Xi, N)
    worst = 0.0
    for p in probes:
        gp = derivative(p)
        pert = para_tilde(gp, T1) + para_tilde(gp, T2)
        worst = max(worst, pert.sobolev_norm(1.0) / p.sobolev_norm(1.0))
    return worst


def estimate_N_Xi(Xi: "EnhancedNoise", probes=None, ratio: float = 0.5) -> int:
    """Smallest reference level, in a doubling sweep, with perturbation
    ratio at most `ratio` on the probe set."""
    if probes is None:
        probes = probe_set(Xi.grid)
    N = 0
    while N <= Xi.n:
        if perturbation_ratio(Xi, N, probes) <= ratio:
            return N
        N = 1 if N == 0 else 2 * N
    raise LevelError(
        "no admissible reference level below the noise level; "
        "sample the noise to a higher level"
    )
