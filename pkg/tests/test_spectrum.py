"""Weighted eigenproblem, heat kernels, Gaussian fits, invariant measure."""

import numpy as np
import pytest

from broxdiff import FourierField, PeriodicGrid, enhance, sample_noise
from broxdiff.errors import GridError, ParameterError, WeightResolutionError
from broxdiff.noise import scale_noise
from broxdiff.spectrum import (
    adjoint_equation_residual,
    refined_kernel,
    assemble_weighted,
    dense_unweighted_eigenvalues,
    eigendecompose,
    gaussian_bound_fit,
    heat_kernel_eigen,
    invariant_density,
    mixing_rate_from_kernels,
    semigroup_resolvent_power,
    stationarity_defect,
    strong_feller_c1_norm,
    theta_kernel,
    transition_row,
)


@pytest.fixture(scope="module")
def seeded_dec():
    grid = PeriodicGrid(512, 96)
    Xi = enhance(sample_noise(3, 64), 8, 1.45, grid)
    pair = assemble_weighted(Xi.W_n, 96)
    return Xi, pair, eigendecompose(pair)


class TestAssembly:
    def test_flat_stiffness_diagonal(self, grid_mid):
        pair = assemble_weighted(FourierField.zero(grid_mid), 48)
        diag = np.diag(pair.stiffness).real
        ks = pair.modes.astype(float)
        assert np.max(np.abs(diag - ks**2 / 2.0 * 2.0 * np.pi)) < 1e-10
        off = pair.stiffness - np.diag(np.diag(pair.stiffness))
        assert np.max(np.abs(off)) < 1e-10

    def test_symmetry_by_construction(self, grid_mid):
        for seed in range(10):
            Xi = enhance(sample_noise(seed, 64), 12, 1.45, grid_mid)
            pair = assemble_weighted(Xi.W_n, 64)
            assert pair.symmetry_defect() <= 1e-12

    def test_basis_too_wide_raises(self, grid_small):
        with pytest.raises(GridError):
            assemble_weighted(FourierField.zero(grid_small), 64)

    def test_unresolved_weight_raises(self):
        grid = PeriodicGrid(128, 42)
        Xi = enhance(sample_noise(2, 42), 40, 1.45, grid)
        big = scale_noise(Xi, 3.0)
        with pytest.raises(WeightResolutionError):
            assemble_weighted(big.W_n, 32)

    def test_similarity_with_unweighted_galerkin(self, seeded_dec):
        """The weighted pencil and the plain nonsymmetric matrix represent
        similar operators; their top eigenvalues agree spectrally."""
        Xi, _pair, dec = seeded_dec
        ev = dense_unweighted_eigenvalues(Xi.xi_n, 96)
        assert np.max(np.abs(ev[:8].imag)) < 1e-9
        assert np.max(np.abs(dec.eigenvalues[:8] - ev[:8].real)) < 1e-7


class TestEigen:
    def test_flat_spectrum(self, grid_mid):
        dec = eigendecompose(assemble_weighted(FourierField.zero(grid_mid), 48))
        expect = [0.0, -0.5, -0.5, -2.0, -2.0, -4.5, -4.5]
        assert np.max(np.abs(dec.eigenvalues[:7] - expect)) < 1e-10

    @pytest.mark.parametrize("seed", range(8))
    def test_invariants_over_seeds(self, seed, grid_mid):
        Xi = enhance(sample_noise(seed, 64), 12, 1.45, grid_mid)
        dec = eigendecompose(assemble_weighted(Xi.W_n, 96))
        assert abs(dec.eigenvalues[0]) <= 1e-9
        assert dec.gap > 0.0
        assert dec.constant_mode_defect() <= 1e-8
        assert dec.weighted_gram_defect() <= 1e-9

    def test_gap_level_differences_shrink(self):
        grid = PeriodicGrid(2048, 341)  # weight resolved up to n = 64
        noise = sample_noise(11, 64)
        gaps = {}
        for n in (8, 16, 32, 64):
            Xi = enhance(noise, n, 1.45, grid)
            gaps[n] = eigendecompose(assemble_weighted(Xi.W_n, 128)).gap
        d1 = abs(gaps[8] - gaps[16])
        d2 = abs(gaps[16] - gaps[32])
        d3 = abs(gaps[32] - gaps[64])
        assert d3 < d1, f"gap differences {d1:.2e} {d2:.2e} {d3:.2e}"


class TestHeatKernel:
    def test_flat_matches_theta(self, grid_mid):
        dec = eigendecompose(assemble_weighted(FourierField.zero(grid_mid), 96))
        for t in (0.05, 0.5, 1.0):
            ker = heat_kernel_eigen(dec, t, 128)
            ref = theta_kernel(t, 128)
            assert np.max(np.abs(ker.values - ref.values)) < 1e-8

    def test_rejects_nonpositive_time(self, seeded_dec):
        _, _, dec = seeded_dec
        with pytest.raises(ParameterError):
            heat_kernel_eigen(dec, 0.0)

    def test_conservativeness(self, seeded_dec):
        _, _, dec = seeded_dec
        for t in (0.05, 0.2, 1.0):
            assert heat_kernel_eigen(dec, t, 128).row_integral_defect() <= 1e-8

    def test_positivity_at_moderate_times(self, seeded_dec):
        _, _, dec = seeded_dec
        for t in (0.25, 0.5, 1.0):
            assert heat_kernel_eigen(dec, t, 128).min_value() > 0.0

    def test_chapman_kolmogorov(self, seeded_dec):
        _, _, dec = seeded_dec
        half = heat_kernel_eigen(dec, 0.4, 128)
        full = heat_kernel_eigen(dec, 0.8, 128)
        assert np.max(np.abs(half.compose(half) - full.values)) <= 1e-8

    def test_detailed_balance(self, seeded_dec):
        _, _, dec = seeded_dec
        assert heat_kernel_eigen(dec, 0.3, 128).detailed_balance_defect() <= 1e-8

    def test_transition_row_matches_kernel(self, seeded_dec):
        _, _, dec = seeded_dec
        ker = heat_kernel_eigen(dec, 0.3, 128)
        row = transition_row(dec, 0.3, float(ker.x[5]), ker.x)
        assert np.max(np.abs(row - ker.values[5])) < 1e-10

    def test_strong_feller_proxy(self, seeded_dec):
        """A discontinuous indicator is mapped to a function whose grid C^1
        norm stays bounded as the output resolution grows."""
        _, _, dec = seeded_dec
        norms = []
        for M_out in (128, 256, 512):
            ker = heat_kernel_eigen(dec, 0.1, M_out)
            f = (ker.x < np.pi).astype(float)
            norms.append(strong_feller_c1_norm(ker, f))
        assert max(norms) / min(norms) <= 2.0, f"C1 norms {norms}"


class TestResolventPower:
    def test_flat_closed_form(self, grid_mid):
        """First-order resolvent stepping: per-mode error obeys the sharp
        x^2 e^{-x} / (2 n) bound, about 1.3e-4 at n = 2048."""
        pair = assemble_weighted(FourierField.zero(grid_mid), 48)
        t, c, n = 0.05, 0.5, 2048
        ker = semigroup_resolvent_power(pair, t, n, c=c, M_out=96)
        ref = theta_kernel(t, 96)
        bound = 4.0 * np.exp(-2.0) / (2 * n) * (2 * 48 + 1) / (2 * np.pi)
        err = np.max(np.abs(ker.values - ref.values))
        assert err <= 2.0 * bound, f"err {err:.2e} vs bound {bound:.2e}"

    def test_error_halves_with_step_doubling(self, seeded_dec):
        _, pair, dec = seeded_dec
        ref = heat_kernel_eigen(dec, 0.5, 96)
        errs = [np.max(np.abs(
            semigroup_resolvent_power(pair, 0.5, n, c=1.0, M_out=96).values
            - ref.values)) for n in (64, 128, 256)]
        for a, b in zip(errs, errs[1:]):
            assert abs(a / b - 2.0) < 0.25, f"errors {errs}"

    def test_short_time_strong_continuity(self, seeded_dec):
        _, pair, dec = seeded_dec
        x = 2.0 * np.pi * np.arange(96) / 96
        f = np.sin(x)
        prev = np.inf
        for t in (0.2, 0.05, 0.0125):
            ker = semigroup_resolvent_power(pair, t, 1, c=1.0, M_out=96)
            dev = np.max(np.abs(ker.apply(f) - f))
            assert dev < prev
            prev = dev


class TestGaussianBounds:
    def test_flat_reference_constants(self):
        ts = np.geomspace(0.005, 0.1, 8)
        fit = gaussian_bound_fit([theta_kernel(t, 128) for t in ts])
        # upper constant 2 (exponent), lower sqrt(2 pi) (prefactor at d = 0)
        assert abs(fit.c_upper - 2.0) / 2.0 < 0.1
        assert abs(fit.c_lower - np.sqrt(2 * np.pi)) / np.sqrt(2 * np.pi) < 0.1

    def test_seeded_fit_finite(self, grid_mid):
        # the smallest kernel time needs the eigenbasis to cover e^{t lam}
        # down to roundoff: K_gal >= sqrt(2*37/t_min) ~ 122
        Xi = enhance(sample_noise(3, 64), 8, 1.45, grid_mid)
        dec = eigendecompose(assemble_weighted(Xi.W_n, 128))
        ts = np.geomspace(0.005, 0.1, 8)
        kers = [heat_kernel_eigen(dec, t, 128) for t in ts]
        fit = gaussian_bound_fit(kers)
        assert np.isfinite(fit.c_lower) and np.isfinite(fit.c_upper)
        assert fit.n_points > 0

    def test_uniformity_in_level(self):
        """Fitted constants stay within a factor two of the per-seed
        median across truncation levels; the small-time kernels carry a
        refinement-estimated truncation floor."""
        noise = sample_noise(3, 64)
        cs = []
        for n in (16, 32, 64):
            grid = PeriodicGrid(max(512, 32 * n), 128)
            Xi = enhance(noise, n, 1.45, grid)
            dec = eigendecompose(assemble_weighted(Xi.W_n, min(320, grid.M // 4)))
            dec_lo = eigendecompose(assemble_weighted(Xi.W_n, min(320, grid.M // 4) * 2 // 3))
            kers = [refined_kernel(dec, dec_lo, t, 96)
                    for t in np.geomspace(0.005, 0.1, 6)]
            fit = gaussian_bound_fit(kers)
            cs.append(max(fit.c_lower, fit.c_upper))
        cs = np.asarray(cs)
        assert np.max(cs) / np.median(cs) <= 2.0, f"constants {cs}"

    def test_environment_scaling_does_not_shrink_constants(self):
        """Doubling the potential does not decrease the fitted constants.

        Doubled from a moderate base: the weighted mass matrix conditions
        like e^{2 delta(W)}, so doubling a unit-amplitude environment
        (delta(W) ~ 11 here) exceeds double precision at desk scale.
        """
        grid = PeriodicGrid(2048, 341)
        for seed in (1, 4):
            Xi = enhance(sample_noise(seed, 64), 8, 1.45, grid)
            cs = []
            for fac in (0.5, 1.0):
                W = scale_noise(Xi, fac).W_n
                dec = eigendecompose(assemble_weighted(W, 320))
                dec_lo = eigendecompose(assemble_weighted(W, 240))
                kers = [refined_kernel(dec, dec_lo, t, 96)
                        for t in np.geomspace(0.01, 0.1, 5)]
                fit = gaussian_bound_fit(kers)
                cs.append(max(fit.c_lower, fit.c_upper))
            assert cs[1] >= cs[0] * 0.99, f"seed {seed}: {cs}"


class TestInvariantMeasure:
    def test_flat_density_uniform(self, grid_mid):
        rho = invariant_density(FourierField.zero(grid_mid))
        assert np.max(np.abs(rho - 1.0 / (2 * np.pi))) < 1e-14

    def test_adjoint_equation(self, grid_mid):
        for seed in range(5):
            Xi = enhance(sample_noise(seed, 64), 12, 1.45, grid_mid)
            assert adjoint_equation_residual(Xi.W_n) <= 1e-9

    def test_stationarity_against_galerkin_columns(self, grid_mid):
        Xi = enhance(sample_noise(3, 64), 12, 1.45, grid_mid)
        assert stationarity_defect(Xi.W_n, Xi.xi_n, 24) <= 1e-8

    def test_kernel_rows_fix_the_density(self, seeded_dec):
        Xi, _, dec = seeded_dec
        ker = heat_kernel_eigen(dec, 0.7, 128)
        rho = invariant_density(Xi.W_n, ker.x)
        back = rho @ ker.values * ker.dx
        assert np.max(np.abs(back - rho)) <= 1e-8


class TestMixingFromKernels:
    def test_flat_rate_is_half(self, grid_mid):
        dec = eigendecompose(assemble_weighted(FourierField.zero(grid_mid), 64))
        rho = np.full(128, 1.0 / (2 * np.pi))
        fit = mixing_rate_from_kernels(
            [heat_kernel_eigen(dec, t, 128) for t in np.linspace(2.0, 8.0, 8)], rho)
        assert abs(fit["rate"] + 0.5) / 0.5 <= 0.05

    def test_seeded_rate_matches_gap(self, seeded_dec):
        Xi, _, dec = seeded_dec
        lam2 = dec.eigenvalues[1]
        rho = invariant_density(Xi.W_n, heat_kernel_eigen(dec, 1.0, 128).x)
        tg = np.linspace(1.0 / abs(lam2), 4.0 / abs(lam2), 8)
        fit = mixing_rate_from_kernels(
            [heat_kernel_eigen(dec, t, 128) for t in tg], rho)
        assert abs(fit["rate"] - lam2) / abs(lam2) <= 0.15
