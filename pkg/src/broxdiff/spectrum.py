"""Weighted Galerkin eigenproblem, heat kernels, Gaussian bounds, invariant measure.

The level-n generator is symmetric in L2(e^{2 W_n} dx), so its spectrum
comes from the generalized Hermitian pencil

    S e = nu B e,      S[m,l] = (1/2) int phi_l' conj(phi_m') w dx,
                       B[m,l] =       int phi_l  conj(phi_m)  w dx,

with phi_k = e^{ikx}, w = e^{2 W_n} and nu = -lambda >= 0.  Quadrature on
the stored grid is spectrally exact once the weight is grid-resolved;
the assembly refuses to proceed otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg
from scipy.special import lambertw

from .errors import GridError, ParameterError, WeightResolutionError
from .fields import FourierField, PeriodicGrid
from .generator import full_grid_derivative


def _weight_tail_fraction(w_values: np.ndarray) -> float:
    """Relative size of the weight spectrum near the grid Nyquist band."""
    M = w_values.shape[0]
    spec = np.abs(np.fft.fft(w_values)) / M
    lo = int(0.4 * M)
    hi = M - lo
    tail = np.max(spec[lo:hi]) if hi > lo else 0.0
    return float(tail / spec[0])


@dataclass(frozen=True)
class GalerkinPair:
    """Assembled stiffness/mass pencil for the weighted eigenproblem."""

    W_n: FourierField
    K_gal: int
    stiffness: np.ndarray = field(repr=False)
    mass: np.ndarray = field(repr=False)
    weight_values: np.ndarray = field(repr=False)
    weight_tail: float = 0.0

    @property
    def modes(self) -> np.ndarray:
        return np.arange(-self.K_gal, self.K_gal + 1)

    def symmetry_defect(self) -> float:
        s = float(np.max(np.abs(self.stiffness - self.stiffness.conj().T)))
        b = float(np.max(np.abs(self.mass - self.mass.conj().T)))
        return max(s, b)


def assemble_weighted(
    W_n: FourierField, K_gal: int, tail_tol: float = 1e-12
) -> GalerkinPair:
    """Galerkin matrices of the Dirichlet form and weighted mass.

    Raises WeightResolutionError when e^{2 W_n} is not resolved on the
    grid (spectral tail above `tail_tol` relative to the mean), and
    GridError when the basis is too wide for exact quadrature.
    """
    grid = W_n.grid
    M = grid.M
    if 4 * K_gal > M:
        raise GridError(f"K_gal={K_gal} too large for exact quadrature on M={M}")
    w = np.exp(2.0 * W_n.values)
    tail = _weight_tail_fraction(w)
    if tail > tail_tol:
        raise WeightResolutionError(
            f"weight spectral tail {tail:.2e} above {tail_tol:.1e}; enlarge M"
        )
    x = grid.points
    ks = np.arange(-K_gal, K_gal + 1)
    phi = np.exp(1j * np.outer(x, ks))
    dphi = phi * (1j * ks)
    dx = grid.dx
    wphi = w[:, None] * phi
    wdphi = w[:, None] * dphi
    mass = phi.conj().T @ wphi * dx
    stiff = 0.5 * (dphi.conj().T @ wdphi) * dx
    mass = 0.5 * (mass + mass.conj().T)
    stiff = 0.5 * (stiff + stiff.conj().T)
    return GalerkinPair(
        W_n=W_n, K_gal=K_gal, stiffness=stiff, mass=mass, weight_values=w,
        weight_tail=tail,
    )


@dataclass(frozen=True)
class SpectralDecomposition:
    """Eigenvalues (descending, top is 0) and weighted-orthonormal modes."""

    pair: GalerkinPair
    eigenvalues: np.ndarray = field(repr=False)
    coeff_vectors: np.ndarray = field(repr=False)  # columns in the mode basis

    @property
    def gap(self) -> float:
        return float(self.eigenvalues[0] - self.eigenvalues[1])

    @property
    def grid(self) -> PeriodicGrid:
        return self.pair.W_n.grid

    def eigenfunction_values(self, x: np.ndarray) -> np.ndarray:
        """Columns e_m evaluated at arbitrary points."""
        phi = np.exp(1j * np.outer(x, self.pair.modes))
        return phi @ self.coeff_vectors

    def weighted_gram_defect(self) -> float:
        """Max deviation of <e_i, e_j>_w from the identity (quadrature form)."""
        V = self.coeff_vectors
        G = V.conj().T @ self.pair.mass @ V
        return float(np.max(np.abs(G - np.eye(G.shape[0]))))

    def constant_mode_defect(self) -> float:
        """Relative deviation of the top eigenfunction from a constant."""
        v = self.coeff_vectors[:, 0]
        K = self.pair.K_gal
        rest = np.abs(v).copy()
        top = rest[K]
        rest[K] = 0.0
        return float(np.max(rest) / top)


def eigendecompose(pair: GalerkinPair) -> SpectralDecomposition:
    """Solve the generalized Hermitian problem; eigenvalues of the generator
    are the negatives of the form eigenvalues, sorted descending."""
    nu, V = scipy.linalg.eigh(pair.stiffness, pair.mass)
    lam = -nu
    order = np.argsort(lam)[::-1]
    lam = lam[order]
    V = V[:, order]
    phase = np.exp(-1j * np.angle(V[pair.K_gal, 0]))
    V = V * phase
    return SpectralDecomposition(pair=pair, eigenvalues=lam, coeff_vectors=V)


def dense_unweighted_eigenvalues(xi_n: FourierField, K_gal: int) -> np.ndarray:
    """Eigenvalues of the dense nonsymmetric Galerkin matrix of the
    generator in plain L2; similarity oracle for the weighted pencil."""
    ks = np.arange(-K_gal, K_gal + 1)
    xi_c = xi_n.coeffs
    K = xi_n.grid.K
    L = np.zeros((ks.size, ks.size), dtype=np.complex128)
    for col, l in enumerate(ks):
        L[col, col] = -0.5 * l**2
        for row, m in enumerate(ks):
            d = m - l
            if -K <= d <= K:
                L[row, col] += 1j * l * xi_c[K + d]
    ev = np.linalg.eigvals(L)
    return ev[np.argsort(-ev.real)]


# -- heat kernels ----------------------------------------------------------------


@dataclass(frozen=True)
class HeatKernel:
    """Transition kernel p_t(x, y) on a square grid of points.

    `floor_values` carries the pointwise roundoff scale of the synthesis
    (machine epsilon times the absolute term sum): entries below it are
    cancellation noise, not kernel values.
    """

    t: float
    x: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)
    weight_values: np.ndarray = field(repr=False)  # e^{2 W_n}(y) on the kernel grid
    mode: str = "eigen"
    floor_values: np.ndarray | None = field(repr=False, default=None)

    def floor(self) -> np.ndarray:
        if self.floor_values is not None:
            return self.floor_values
        return np.full_like(self.values, np.finfo(float).eps * float(np.max(self.values)))

    @property
    def dx(self) -> float:
        return float(2.0 * np.pi / self.x.size)

    def row_integral_defect(self) -> float:
        """Max deviation of int p_t(x, y) dy from 1."""
        sums = self.values.sum(axis=1) * self.dx
        return float(np.max(np.abs(sums - 1.0)))

    def min_value(self) -> float:
        return float(np.min(self.values))

    def detailed_balance_defect(self) -> float:
        """Max of |p(x,y) e^{2W(x)} - p(y,x) e^{2W(y)}| over the grid."""
        a = self.values * self.weight_values[:, None]
        return float(np.max(np.abs(a - a.T)))

    def compose(self, other: "HeatKernel") -> np.ndarray:
        """Quadrature composition (p_s o p_t)(x, z)."""
        return self.values @ other.values * self.dx

    def apply(self, f_values: np.ndarray) -> np.ndarray:
        return self.values @ f_values * self.dx


def heat_kernel_eigen(
    dec: SpectralDecomposition, t: float, M_out: int = 256, x_offset: float = 0.0
) -> HeatKernel:
    """p_t(x,y) = sum_m e^{t lam_m} e_m(x) conj(e_m(y)) e^{2 W_n(y)}.

    `x_offset` shifts the evaluation nodes by a fraction of the spacing;
    0.5 gives midpoint nodes, which make rectangle sums over grid-aligned
    cells second-order accurate.
    """
    if t <= 0.0:
        raise ParameterError(f"time must be positive, got {t}")
    x = 2.0 * np.pi * (np.arange(M_out) + x_offset) / M_out
    E = dec.eigenfunction_values(x)
    w = np.exp(2.0 * dec.pair.W_n.evaluate(x))
    amp = np.exp(t * dec.eigenvalues)
    p = (E * amp) @ E.conj().T
    p = p.real * w[None, :]
    absE = np.abs(E)
    scale = ((absE * amp) @ absE.T) * w[None, :]
    # three error channels: summation roundoff at the local term scale,
    # eigenvector perturbations at each mode's sup scale, and the assembly
    # perturbation from the unresolved part of the weight spectrum
    eps_eff = np.finfo(float).eps * E.shape[1] + dec.pair.weight_tail
    colmax = np.max(absE, axis=0)
    row = ((colmax * amp) @ absE.T) * w  # x-independent channel
    col = (absE * amp) @ colmax  # y-channel, weight applied below
    floor = eps_eff * (scale + row[None, :] + np.outer(col, w))
    return HeatKernel(t=t, x=x, values=p, weight_values=w, mode="eigen",
                      floor_values=floor)


def semigroup_resolvent_power(
    pair: GalerkinPair,
    t: float,
    n_steps: int,
    c: float = 1.0,
    M_out: int = 256,
    x_offset: float = 0.0,
) -> HeatKernel:
    """Backward-Euler resolvent powers: e^{tc} (1 + (t/n)(-L + c))^{-n}.

    First-order in 1/n toward the eigen-expansion kernel; each step is one
    weighted Galerkin solve.
    """
    if t <= 0.0:
        raise ParameterError(f"time must be positive, got {t}")
    if n_steps < 1:
        raise ParameterError(f"n_steps must be >= 1, got {n_steps}")
    B = pair.mass
    A = (1.0 + t * c / n_steps) * B + (t / n_steps) * pair.stiffness
    lu = scipy.linalg.lu_factor(A)
    step = scipy.linalg.lu_solve(lu, B)
    # binary powering of the one-step solve operator
    X = np.eye(B.shape[0], dtype=np.complex128)
    base = step
    m = n_steps
    while m:
        if m & 1:
            X = base @ X
        base = base @ base
        m >>= 1
    X *= np.exp(t * c)
    x = 2.0 * np.pi * (np.arange(M_out) + x_offset) / M_out
    phi = np.exp(1j * np.outer(x, pair.modes))
    p = (phi @ X @ phi.conj().T).real / (2.0 * np.pi)
    w = np.exp(2.0 * pair.W_n.evaluate(x))
    absphi = np.abs(phi)
    eps_eff = np.finfo(float).eps * phi.shape[1] + pair.weight_tail
    floor = eps_eff * (absphi @ np.abs(X) @ absphi.T) / (2.0 * np.pi)
    return HeatKernel(t=t, x=x, values=p, weight_values=w, mode="resolvent",
                      floor_values=floor)


def transition_row(
    dec: SpectralDecomposition, t: float, x0: float, y: np.ndarray
) -> np.ndarray:
    """p_t(x0, y) for arbitrary targets y (one synthesis, no square grid)."""
    if t <= 0.0:
        raise ParameterError(f"time must be positive, got {t}")
    e0 = dec.eigenfunction_values(np.asarray([x0]))[0]
    E = dec.eigenfunction_values(np.asarray(y))
    w = np.exp(2.0 * dec.pair.W_n.evaluate(np.asarray(y)))
    amp = np.exp(t * dec.eigenvalues)
    return (E.conj() @ (amp * e0)).real * w


def refined_kernel(
    dec: SpectralDecomposition,
    dec_coarse: SpectralDecomposition,
    t: float,
    M_out: int = 256,
    safety: float = 3.0,
) -> HeatKernel:
    """Eigen kernel whose floor includes an empirical truncation estimate.

    The pointwise gap between the kernel at the working band and at a
    coarser band estimates the Galerkin truncation error; entries below
    it carry no information.  Needed at small times in rough
    environments, where eigenfunction tails converge slowly.
    """
    fine = heat_kernel_eigen(dec, t, M_out)
    coarse = heat_kernel_eigen(dec_coarse, t, M_out)
    gap = safety * np.abs(fine.values - coarse.values)
    floor = np.maximum(fine.floor(), gap)
    return HeatKernel(t=t, x=fine.x, values=fine.values,
                      weight_values=fine.weight_values, mode="eigen",
                      floor_values=floor)


def theta_kernel(t: float, M_out: int = 256, x_offset: float = 0.0) -> HeatKernel:
    """Exact flat kernel of (1/2) Lap on the circle (spectral theta sum)."""
    if t <= 0.0:
        raise ParameterError(f"time must be positive, got {t}")
    kmax = int(np.ceil(np.sqrt(168.0 / t))) + 2
    x = 2.0 * np.pi * (np.arange(M_out) + x_offset) / M_out
    d = x[None, :] - x[:, None]
    k = np.arange(1, kmax + 1)
    p = (1.0 + 2.0 * np.sum(
        np.exp(-t * k**2 / 2.0)[:, None, None] * np.cos(k[:, None, None] * d[None, :, :]),
        axis=0,
    )) / (2.0 * np.pi)
    scale = (1.0 + 2.0 * np.sum(np.exp(-t * k**2 / 2.0))) / (2.0 * np.pi)
    floor = np.full((M_out, M_out), np.finfo(float).eps * (kmax + 1) * scale)
    return HeatKernel(t=t, x=x, values=p, weight_values=np.ones(M_out), mode="theta",
                      floor_values=floor)


# -- Gaussian bound fitting -------------------------------------------------------


def torus_distance(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = np.abs(x[:, None] - y[None, :]) % (2.0 * np.pi)
    return np.minimum(d, 2.0 * np.pi - d)


@dataclass(frozen=True)
class GaussianFit:
    c_lower: float
    c_upper: float
    n_points: int
    floor: float


def gaussian_bound_fit(kernels: list[HeatKernel], floor_factor: float = 100.0) -> GaussianFit:
    """Smallest constants with

        (1/(c sqrt(t))) e^{-c d^2/t} <= p_t(x,y) <= (c/sqrt(t)) e^{-d^2/(c t)}

    over all machine-positive kernel entries; d is the torus distance.
    Entries below floor_factor times the pointwise cancellation floor of
    the synthesis are excluded (they carry no information); negativity
    above that floor raises with the offending (t, x, y).
    """
    c_low = 0.0
    c_up = 0.0
    n_pts = 0
    floor_used = 0.0
    for ker in kernels:
        t = ker.t
        d = torus_distance(ker.x, ker.x)
        p = ker.values
        floor = floor_factor * ker.floor()
        floor_used = max(floor_used, float(np.max(floor)))
        neg = p < -floor
        if np.any(neg):
            i, j = np.argwhere(neg)[0]
            raise ParameterError(
                f"kernel negative above the roundoff floor at t={t}, "
                f"x={ker.x[i]:.4f}, y={ker.x[j]:.4f}: {p[i, j]:.3e}"
            )
        mask = p > floor
        n_pts += int(np.count_nonzero(mask))
        pm = p[mask]
        dm = d[mask]
        st = np.sqrt(t)
        # lower bound: c e^{c d^2/t} = 1/(p sqrt(t))
        a = dm**2 / t
        b = 1.0 / (pm * st)
        need_low = np.where(
            a > 0.0, np.real(lambertw(np.maximum(a * b, 1e-300))) / np.maximum(a, 1e-300), b
        )
        # upper bound: y e^y = d^2/(p t^{3/2}), c = d^2/(t y)
        q = dm**2 / (pm * t * st)
        with np.errstate(divide="ignore", invalid="ignore"):
            y = np.real(lambertw(np.maximum(q, 1e-300)))
            need_up = np.where(dm > 0.0, dm**2 / (t * np.maximum(y, 1e-300)), pm * st)
        c_low = max(c_low, float(np.max(need_low)))
        c_up = max(c_up, float(np.max(need_up)))
    return GaussianFit(c_lower=c_low, c_upper=c_up, n_points=n_pts, floor=floor_used)


# -- invariant measure -------------------------------------------------------------


def invariant_density(W_n: FourierField, x: np.ndarray | None = None) -> np.ndarray:
    """Normalized e^{2 W_n} / Z on the grid (or on supplied points)."""
    if x is None:
        w = np.exp(2.0 * W_n.values)
        dx = W_n.grid.dx
    else:
        w = np.exp(2.0 * W_n.evaluate(x))
        dx = 2.0 * np.pi / x.size
    return w / (np.sum(w) * dx)


def adjoint_equation_residual(W_n: FourierField) -> float:
    """Relative L2 residual of grad f - 2 grad W_n f = 0 for f = e^{2 W_n}."""
    f = np.exp(2.0 * W_n.values)
    xi = full_grid_derivative(W_n.values)
    r = full_grid_derivative(f) - 2.0 * xi * f
    return float(np.linalg.norm(r) / np.linalg.norm(f))


def stationarity_defect(W_n: FourierField, xi_n: FourierField, K_test: int) -> float:
    """Max over test modes of <L e^{ilx}, rho> relative to the mode scale.

    Directly checks that the density annihilates the generator columns:
    <L phi_l, rho> = -l^2/2 rho_{-l} + i l (xi rho)_{-l} (times 2 pi).
    """
    grid = W_n.grid
    rho = invariant_density(W_n)
    xi = xi_n.values
    rho_hat = np.fft.fft(rho) / grid.M
    xirho_hat = np.fft.fft(xi * rho) / grid.M
    worst = 0.0
    for l in range(1, K_test + 1):
        val = -0.5 * l**2 * rho_hat[-l % grid.M] + 1j * l * xirho_hat[-l % grid.M]
        worst = max(worst, abs(val) / max(0.5 * l**2 * abs(rho_hat[0]), 1e-300))
    return worst


def mixing_rate_from_kernels(
    kernels: list[HeatKernel], rho: np.ndarray
) -> dict[str, float]:
    """Fit log TV(p_t(x, .), rho) = log C + t log(lambda) over the worst x."""
    ts = np.array([k.t for k in kernels])
    tvs = []
    for ker in kernels:
        diff = np.abs(ker.values - rho[None, :])
        tv = 0.5 * np.max(diff.sum(axis=1) * ker.dx)
        tvs.append(tv)
    tvs = np.asarray(tvs)
    keep = tvs > 1e-13
    if np.count_nonzero(keep) < 2:
        raise ParameterError("degenerate fit window: total variation already at floor")
    slope, intercept = np.polyfit(ts[keep], np.log(tvs[keep]), 1)
    return {
        "rate": float(slope),
        "C": float(np.exp(intercept)),
        "lambda": float(np.exp(slope)),
        "t_min": float(ts[keep].min()),
        "t_max": float(ts[keep].max()),
        "tv_first": float(tvs[0]),
        "tv_last": float(tvs[-1]),
    }


def strong_feller_c1_norm(ker: HeatKernel, f_values: np.ndarray) -> float:
    """Grid C^1 norm of the kernel image of a bounded measurable input."""
    u = ker.apply(f_values)
    du = full_grid_derivative(u)
    return float(np.max(np.abs(u)) + np.max(np.abs(du)))
