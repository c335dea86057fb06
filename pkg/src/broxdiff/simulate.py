"""Quenched Monte Carlo for the regularized diffusion.

Euler-Maruyama for dX = xi_n(X) dt + dB on the real line; the noise is
additive, so Milstein would coincide with it.  The drift is evaluated by
exact trigonometric (Horner) synthesis of xi_n at the unwrapped positions,
and the same recursion feeds per-path spectral occupation accumulators

    A_k(m) = sum_{j<m} e^{i k X_j},

from which the path integral of any band-limited observable comes out by
one dot product with its coefficients (trapezoid ends corrected from the
stored checkpoint positions).

Increments are drawn from a single counter-based Philox stream keyed by
the master seed, one row of n_paths standard normals per step, so a
given (environment seed, master seed, configuration) reproduces the
ensemble bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError
from .fields import FourierField

TWO_PI = 2.0 * np.pi


def stability_dt(xi_n: FourierField | None) -> float:
    """Step-size rule dt <= 0.1 / (1 + |xi_n|_inf^2)."""
    if xi_n is None:
        return 0.1
    return 0.1 / (1.0 + xi_n.sup_norm() ** 2)


def _positive_coeffs(xi_n: FourierField | None, trim: float = 1e-15):
    if xi_n is None:
        return np.zeros(0, dtype=np.complex128)
    K = xi_n.grid.K
    pos = np.asarray(xi_n.coeffs[K + 1 :])
    scale = float(np.max(np.abs(xi_n.coeffs))) if np.any(xi_n.coeffs) else 0.0
    if scale == 0.0:
        return np.zeros(0, dtype=np.complex128)
    sig = np.nonzero(np.abs(pos) > trim * scale)[0]
    kmax = int(sig[-1]) + 1 if sig.size else 0
    return pos[:kmax]


@dataclass(frozen=True)
class PathEnsemble:
    """Result of one quenched Euler-Maruyama run."""

    dt: float
    T: float
    x0: float
    n_paths: int
    master_seed: int
    drift_level: int
    checkpoint_times: np.ndarray = field(repr=False)
    checkpoint_positions: np.ndarray = field(repr=False)  # (n_check, n_paths), unwrapped
    occupation_snapshots: np.ndarray | None = field(repr=False, default=None)
    occupation_kmax: int = 0
    hist_per_path: np.ndarray | None = field(repr=False, default=None)
    hist_edges: np.ndarray | None = field(repr=False, default=None)
    hist_samples: int = 0
    paths: np.ndarray | None = field(repr=False, default=None)  # (n_steps+1, n_paths)

    def wrapped(self, idx: int) -> np.ndarray:
        return np.mod(self.checkpoint_positions[idx], TWO_PI)

    def checkpoint_index(self, t: float) -> int:
        i = int(np.argmin(np.abs(self.checkpoint_times - t)))
        if abs(self.checkpoint_times[i] - t) > 0.5 * self.dt:
            raise ParameterError(f"time {t} is not a stored checkpoint")
        return i

    def path_integral(self, observable: FourierField, s: float, t: float) -> np.ndarray:
        """Trapezoid integral of a band-limited observable along each path."""
        if self.occupation_snapshots is None:
            raise ParameterError("ensemble was simulated without occupation accumulators")
        i_s, i_t = self.checkpoint_index(s), self.checkpoint_index(t)
        K = observable.grid.K
        pos = observable.coeffs[K + 1 : K + 1 + self.occupation_kmax]
        tail = np.max(np.abs(observable.coeffs[K + 1 + self.occupation_kmax :])) if (
            observable.grid.K > self.occupation_kmax
        ) else 0.0
        scale = max(float(np.max(np.abs(observable.coeffs))), 1e-300)
        if tail > 1e-12 * scale:
            raise ParameterError(
                f"observable has modes beyond the accumulated band "
                f"k<={self.occupation_kmax} (tail {tail:.2e})"
            )
        dA = (
            self.occupation_snapshots[i_t] - self.occupation_snapshots[i_s]
        ).astype(np.complex128)
        left = observable.coeffs[K].real * round((t - s) / self.dt)
        left = left + 2.0 * np.real(pos @ dA)
        ends = 0.5 * (
            observable.evaluate(self.checkpoint_positions[i_t])
            - observable.evaluate(self.checkpoint_positions[i_s])
        )
        return self.dt * (left + ends)


def simulate_em(
    xi_n: FourierField | None,
    x0: float,
    T: float,
    dt: float,
    n_paths: int,
    master_seed: int,
    drift_level: int = 0,
    checkpoint_times=(),
    occupation_kmax: int = 0,
    hist_bins: int = 0,
    burn_in: float = 0.0,
    record_every: int = 1,
    store_full: bool = False,
    enforce_dt_rule: bool = True,
) -> PathEnsemble:
    """Euler-Maruyama: X_{j+1} = X_j + xi_n(X_j) dt + sqrt(dt) N(0,1).

    Unwrapped real-line positions; wrapped statistics are taken by the
    consumers.  Checkpoints snapshot positions (and, if requested, the
    spectral occupation accumulators); the per-path histogram accumulates
    wrapped positions after `burn_in` every `record_every` steps.
    """
    if dt <= 0.0 or T <= 0.0:
        raise ParameterError("dt and T must be positive")
    rule = stability_dt(xi_n)
    if enforce_dt_rule and dt > rule * (1.0 + 1e-12):
        raise ParameterError(
            f"dt={dt:.3e} violates the stability rule dt <= {rule:.3e} "
            "for this drift"
        )
    n_steps = int(round(T / dt))
    check_steps = []
    for t in checkpoint_times:
        m = int(round(t / dt))
        if not (0 <= m <= n_steps):
            raise ParameterError(f"checkpoint {t} outside [0, T]")
        check_steps.append(m)
    coeffs = _positive_coeffs(xi_n)
    n_drift = coeffs.size
    k_shared = max(n_drift, occupation_kmax)
    mean_drift = float(xi_n.coeffs[xi_n.grid.K].real) if xi_n is not None else 0.0

    if store_full and (n_steps + 1) * n_paths > 2 * 10**8:
        raise ParameterError("full path storage would exceed the memory budget")

    rng = np.random.Generator(np.random.Philox(key=master_seed))
    X = np.full(n_paths, float(x0))
    sdt = np.sqrt(dt)
    burn_steps = int(round(burn_in / dt))

    acc = (
        np.zeros((occupation_kmax, n_paths), dtype=np.complex128)
        if occupation_kmax > 0
        else None
    )
    snapshots = (
        np.zeros((len(check_steps), occupation_kmax, n_paths), dtype=np.complex64)
        if occupation_kmax > 0
        else None
    )
    positions = np.zeros((len(check_steps), n_paths))
    hist = None
    edges = None
    n_recorded = 0
    if hist_bins > 0:
        hist = np.zeros((n_paths, hist_bins), dtype=np.int64)
        edges = np.linspace(0.0, TWO_PI, hist_bins + 1)
    full = np.zeros((n_steps + 1, n_paths)) if store_full else None
    if full is not None:
        full[0] = X
    step_of = {m: i for i, m in enumerate(check_steps)}
    path_idx = np.arange(n_paths)

    for j in range(n_steps + 1):
        if j in step_of:
            i = step_of[j]
            positions[i] = X
            if snapshots is not None:
                snapshots[i] = acc.astype(np.complex64)
        if j == n_steps:
            break
        if k_shared > 0:
            z = np.exp(1j * X)
            zk = np.ones_like(z)
            drift_c = np.zeros_like(z)
            for k in range(1, k_shared + 1):
                zk = zk * z
                if k <= n_drift:
                    drift_c += coeffs[k - 1] * zk
                if acc is not None and k <= occupation_kmax:
                    acc[k - 1] += zk
            drift = mean_drift + 2.0 * drift_c.real
        else:
            drift = mean_drift
        if hist is not None and j >= burn_steps and (j - burn_steps) % record_every == 0:
            b = np.minimum((np.mod(X, TWO_PI) / TWO_PI * hist_bins).astype(int),
                           hist_bins - 1)
            hist[path_idx, b] += 1
            n_recorded += 1
        X = X + drift * dt + sdt * rng.standard_normal(n_paths)
        if full is not None:
            full[j + 1] = X

    return PathEnsemble(
        dt=dt,
        T=T,
        x0=x0,
        n_paths=n_paths,
        master_seed=master_seed,
        drift_level=drift_level,
        checkpoint_times=np.asarray([m * dt for m in check_steps]),
        checkpoint_positions=positions,
        occupation_snapshots=snapshots,
        occupation_kmax=occupation_kmax,
        hist_per_path=hist,
        hist_edges=edges,
        hist_samples=n_recorded,
        paths=full,
    )


# -- occupation measure ----------------------------------------------------------


def density_bin_probabilities(rho_fn, n_bins: int, oversample: int = 16) -> np.ndarray:
    """Integrate a density over equal bins of the circle by fine midpoint rule."""
    m = n_bins * oversample
    x = (np.arange(m) + 0.5) * TWO_PI / m
    rho = rho_fn(x)
    rho = rho / (np.sum(rho) * TWO_PI / m)
    return rho.reshape(n_bins, oversample).sum(axis=1) * TWO_PI / m


def _tv(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.sum(np.abs(p - q)))


@dataclass(frozen=True)
class OccupationReport:
    tv: float
    ks: float
    tv_se: float
    tv_floor: float
    n_samples: int
    n_bins: int

    @property
    def tv_excess(self) -> float:
        """Total variation above the sampling noise floor."""
        return self.tv - self.tv_floor


def occupation_vs_density(
    ens: PathEnsemble, rho_fn, n_boot: int = 200, boot_seed: int = 0
) -> OccupationReport:
    """Wrapped occupation histogram against a target density.

    The TV of an empirical histogram has a positive noise floor (the mean
    absolute fluctuation of the bin frequencies); the floor and the
    bootstrap spread are both estimated by resampling whole paths, which
    respects the serial correlation along each path.
    """
    if ens.hist_per_path is None or ens.hist_samples == 0:
        raise ParameterError("ensemble carries no occupation histogram")
    H = ens.hist_per_path
    n_bins = H.shape[1]
    q = density_bin_probabilities(rho_fn, n_bins)
    total = H.sum()
    p = H.sum(axis=0) / total
    tv = _tv(p, q)
    cdf_p = np.cumsum(p)
    cdf_q = np.cumsum(q)
    ks = float(np.max(np.abs(cdf_p - cdf_q)))
    rng = np.random.Generator(np.random.Philox(key=boot_seed))
    n_paths = H.shape[0]
    tvs = np.empty(n_boot)
    boot_p = np.empty((n_boot, n_bins))
    for b in range(n_boot):
        idx = rng.integers(0, n_paths, n_paths)
        Hb = H[idx].sum(axis=0)
        pb = Hb / Hb.sum()
        boot_p[b] = pb
        tvs[b] = _tv(pb, q)
    tv_se = float(np.std(tvs, ddof=1))
    # mean absolute bin fluctuation, scaled from the bootstrap spread
    bin_sd = np.std(boot_p, axis=0, ddof=1)
    tv_floor = float(0.5 * np.sum(bin_sd) * np.sqrt(2.0 / np.pi))
    return OccupationReport(
        tv=tv,
        ks=ks,
        tv_se=tv_se,
        tv_floor=tv_floor,
        n_samples=int(total),
        n_bins=n_bins,
    )


# -- mixing ------------------------------------------------------------------------


@dataclass(frozen=True)
class MixingFit:
    rate: float
    C: float
    lam: float
    t_grid: np.ndarray
    tv: np.ndarray
    rate_se: float = 0.0


def mixing_rate_mc(
    ens: PathEnsemble,
    rho_fn,
    n_bins: int = 64,
    n_boot: int = 100,
    boot_seed: int = 1,
) -> MixingFit:
    """Fit log TV(law(X_t), mu) ~ log C + rate * t from checkpoint histograms.

    Points within twice the sampling floor of the target are dropped from
    the fit window; the rate uncertainty comes from path bootstrap.
    """
    q = density_bin_probabilities(rho_fn, n_bins)
    times = ens.checkpoint_times
    wrapped = np.mod(ens.checkpoint_positions, TWO_PI)
    bins = np.minimum((wrapped / TWO_PI * n_bins).astype(int), n_bins - 1)
    n_paths = ens.n_paths
    tvs = np.empty(times.size)
    for i in range(times.size):
        counts = np.bincount(bins[i], minlength=n_bins)
        tvs[i] = _tv(counts / n_paths, q)
    floor = 0.5 * n_bins * np.sqrt(2.0 / np.pi) * np.sqrt(1.0 / (n_bins * n_paths))
    keep = tvs > 2.0 * floor
    if np.count_nonzero(keep) < 3:
        raise ParameterError("degenerate fit window: too few TV points above the floor")
    slope, intercept = np.polyfit(times[keep], np.log(tvs[keep]), 1)
    rng = np.random.Generator(np.random.Philox(key=boot_seed))
    slopes = np.empty(n_boot)
    for b in range(n_boot):
        idx = rng.integers(0, n_paths, n_paths)
        tvb = np.empty(times.size)
        for i in range(times.size):
            counts = np.bincount(bins[i][idx], minlength=n_bins)
            tvb[i] = _tv(counts / n_paths, q)
        good = keep & (tvb > 0)
        slopes[b] = np.polyfit(times[good], np.log(tvb[good]), 1)[0]
    return MixingFit(
        rate=float(slope),
        C=float(np.exp(intercept)),
        lam=float(np.exp(slope)),
        t_grid=times[keep],
        tv=tvs[keep],
        rate_se=float(np.std(slopes, ddof=1)),
    )


# -- path regularity -----------------------------------------------------------------


@dataclass(frozen=True)
class HolderFit:
    exponent: float
    lags: np.ndarray
    msq: np.ndarray


def holder_exponent(ens: PathEnsemble, n_lags: int = 10) -> HolderFit:
    """Regress log E|X_{t+h} - X_t|^2 on log h; half the slope is the
    path Hoelder exponent estimate."""
    if ens.paths is None:
        raise ParameterError("ensemble was simulated without full path storage")
    n_steps = ens.paths.shape[0] - 1
    h_min = 4
    h_max = max(h_min + 1, n_steps // 100)
    lags = np.unique(
        np.round(np.geomspace(h_min, h_max, n_lags)).astype(int)
    )
    msq = np.empty(lags.size)
    for i, h in enumerate(lags):
        d = ens.paths[h:] - ens.paths[:-h]
        msq[i] = float(np.mean(d**2))
    slope = np.polyfit(np.log(lags * ens.dt), np.log(msq), 1)[0]
    return HolderFit(exponent=float(slope / 2.0), lags=lags * ens.dt, msq=msq)


# -- martingale problem ----------------------------------------------------------------


@dataclass(frozen=True)
class MartingaleReport:
    z_scores: list[dict]
    n_paths: int

    def max_abs_z(self) -> float:
        return max(abs(r["z"]) for r in self.z_scores)


def _functional_values(name: str, ens: PathEnsemble, s: float):
    """Fixed dictionary of bounded functionals of the path up to time s."""
    if name == "one":
        return np.ones(ens.n_paths)
    i_s = ens.checkpoint_index(s)
    xs = ens.checkpoint_positions[i_s]
    if name == "sin":
        return np.sin(xs)
    if name == "cos":
        return np.cos(xs)
    if name == "half_indicator":
        i_half = ens.checkpoint_index(s / 2.0)
        w = np.mod(ens.checkpoint_positions[i_half], TWO_PI)
        return (w < np.pi).astype(float)
    raise ParameterError(f"unknown test functional {name!r}")


def martingale_test(
    u: FourierField,
    lu: FourierField,
    ens: PathEnsemble,
    pairs_and_functionals,
) -> MartingaleReport:
    """Normalized conditional-increment statistics of the candidate martingale

        M_t = u(X_t) - u(X_0) - int_0^t (L_n u)(X_r) dr

    over (s, t, F) triples: z = mean[(M_t - M_s) F] / SE.  The integral
    uses the trapezoid rule along the paths through the spectral
    occupation accumulators; L_n u is supplied by the caller (the direct
    finite-level formula, exact for band-limited u).
    """
    rows = []
    for s, t, fname in pairs_and_functionals:
        i_s, i_t = ens.checkpoint_index(s), ens.checkpoint_index(t)
        du = u.evaluate(ens.checkpoint_positions[i_t]) - u.evaluate(
            ens.checkpoint_positions[i_s]
        )
        integral = ens.path_integral(lu, s, t)
        dm = du - integral
        F = _functional_values(fname, ens, s)
        w = dm * F
        mean = float(np.mean(w))
        sd = float(np.std(w, ddof=1))
        if sd < 1e-14 * max(1.0, float(np.max(np.abs(w))) if w.size else 1.0) or sd == 0.0:
            z = 0.0
            se = 0.0
        else:
            se = sd / np.sqrt(ens.n_paths)
            z = mean / se
        rows.append(
            {"s": s, "t": t, "F": fname, "mean": mean, "se": se, "z": float(z)}
        )
    return MartingaleReport(z_scores=rows, n_paths=ens.n_paths)


# -- finite dimensional distributions ------------------------------------------------


def fdd_check(
    ens: PathEnsemble,
    times: list[float],
    cells: list[tuple[float, float]],
    dec,
    M_quad: int = 1024,
    min_expected: float = 5.0,
) -> dict:
    """Joint cell probabilities against kernel-product integrals.

    Expected probabilities come from the eigen-expansion kernels of `dec`
    sampled at midpoint nodes, so rectangle sums over the wrapped cells
    [a, b) are second-order quadratures of the product integrals; at most
    three times, all stored checkpoints.
    """
    from .spectrum import heat_kernel_eigen, transition_row

    if not (1 <= len(times) <= 3):
        raise ParameterError("between one and three times are supported")
    idxs = [ens.checkpoint_index(t) for t in times]
    wrapped = [np.mod(ens.checkpoint_positions[i], TWO_PI) for i in idxs]

    def in_cell(w, cell):
        a, b = cell
        a, b = a % TWO_PI, b % TWO_PI
        if a <= b:
            return (w >= a) & (w < b)
        return (w >= a) | (w < b)

    x = TWO_PI * (np.arange(M_quad) + 0.5) / M_quad
    dx = TWO_PI / M_quad
    dens = [transition_row(dec, times[0], ens.x0, x)]
    for a, b in zip(times[:-1], times[1:]):
        dens.append(heat_kernel_eigen(dec, b - a, M_quad, x_offset=0.5).values)

    shape = tuple(len(cells) for _ in times)
    expected = np.zeros(shape)
    observed = np.zeros(shape)
    masks = [[in_cell(x, c) for c in cells] for _ in times]
    emp_masks = [[in_cell(w, c) for c in cells] for w in wrapped]

    for multi in np.ndindex(shape):
        vec = dens[0] * masks[0][multi[0]]
        for d in range(1, len(times)):
            vec = (vec @ dens[d]) * dx * masks[d][multi[d]]
        expected[multi] = vec.sum() * dx
        sel = emp_masks[0][multi[0]]
        for d in range(1, len(times)):
            sel = sel & emp_masks[d][multi[d]]
        observed[multi] = np.count_nonzero(sel)
    total_p = expected.sum()
    if abs(total_p - 1.0) > 0.05:
        raise ParameterError(f"cells do not partition the circle (mass {total_p:.3f})")
    expected_counts = expected / total_p * ens.n_paths
    if np.any(expected_counts < min_expected):
        raise ParameterError("a product cell has too small an expected count")
    chi2 = float(np.sum((observed - expected_counts) ** 2 / expected_counts))
    dof = observed.size - 1
    from scipy.stats import chi2 as chi2_dist

    pval = float(chi2_dist.sf(chi2, dof))
    return {
        "chi2": chi2,
        "dof": dof,
        "p_value": pval,
        "observed": observed,
        "expected": expected_counts,
    }


def wrapped_ks_against_kernel(ens: PathEnsemble, t: float, x: np.ndarray,
                              density: np.ndarray) -> float:
    """KS distance of the wrapped time-t law against a density on a grid.

    `density` holds p_t(x0, y) at the equispaced nodes `x`; the CDF is
    accumulated by the trapezoid rule so the comparison is second-order
    in the grid spacing.
    """
    i = ens.checkpoint_index(t)
    w = np.sort(np.mod(ens.checkpoint_positions[i], TWO_PI))
    dx = TWO_PI / x.size
    total = float(np.sum(density) * dx)  # periodic trapezoid = plain sum
    inc = 0.5 * (density[:-1] + density[1:]) * dx
    cdf = np.concatenate([[0.0], np.cumsum(inc)]) / total
    emp = np.searchsorted(w, x, side="left") / w.size
    return float(np.max(np.abs(emp - cdf)))
