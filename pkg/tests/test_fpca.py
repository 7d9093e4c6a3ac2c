import numpy as np
import pytest

from mvcm.coefficients import fit_auto
from mvcm.fpca import (DegreesOfFreedomError, compute_scores, cross_covariance_from_scores,
                       empirical_covariance, quadrature_weights, riemann_weights, run_fpca,
                       spectral_decompose)
from mvcm.simulation import SimulationDesign, example_eigenfunctions, generate_dataset
from mvcm.smoothing import smooth_auto


def uniform_grid(M, seed=0):
    return np.sort(np.random.default_rng(seed).uniform(0, 1, M))


def sin_cos(grid):
    return example_eigenfunctions(grid)[0]       # sqrt2 sin, sqrt2 cos


def l2_error(a, b, w):
    return np.sqrt(np.sum((a - b) ** 2 * w))


class TestQuadrature:
    def test_weights_sum_to_one(self):
        for grid in (uniform_grid(37), np.linspace(0, 1, 11)):
            assert quadrature_weights(grid).sum() == pytest.approx(1.0, abs=1e-14)

    def test_riemann(self):
        np.testing.assert_allclose(riemann_weights([0.2, 0.5, 0.6]), [0.2, 0.3, 0.1])


class TestEmpiricalCovariance:
    def test_zero(self):
        cov = empirical_covariance(np.zeros((5, 2, 4)), 2, np.linspace(0, 1, 4))
        assert np.all(cov.sigma_eta == 0)

    def test_single_curve(self):
        v = np.array([1.0, -2.0, 0.5])
        cov = empirical_covariance(v[None, None, :], 0, [0.1, 0.5, 0.9])
        np.testing.assert_allclose(cov.block(0), np.outer(v, v))

    def test_definition_and_symmetry(self, rng):
        eta = rng.normal(size=(20, 2, 6))
        cov = empirical_covariance(eta, 3, np.linspace(0, 1, 6))
        np.testing.assert_allclose(cov.block(0, 1), eta[:, 0].T @ eta[:, 1] / 17, atol=1e-12)
        np.testing.assert_allclose(cov.block(0, 1), cov.block(1, 0).T)
        np.testing.assert_array_equal(cov.block(1), cov.block(1).T)

    def test_pointwise(self, rng):
        eta = rng.normal(size=(20, 2, 6))
        grid = np.linspace(0, 1, 6)
        cov = empirical_covariance(eta, 3, grid)
        diag = cov.pointwise()
        np.testing.assert_allclose(diag[2], eta[:, :, 2].T @ eta[:, :, 2] / 17, atol=1e-12)
        mid = cov.pointwise([0.1])[0]
        np.testing.assert_allclose(mid, 0.5 * (diag[0] + diag[1]), atol=1e-12)

    def test_dof(self):
        with pytest.raises(DegreesOfFreedomError):
            empirical_covariance(np.zeros((3, 1, 4)), 3, np.linspace(0, 1, 4))

    def test_top_eigenvalue_monte_carlo(self):
        grid = uniform_grid(100, 1)
        psi = sin_cos(grid)[0]
        tops = []
        for rep in range(20):
            xi = np.random.default_rng([21, rep]).normal(scale=np.sqrt(1.2), size=500)
            eig = spectral_decompose(empirical_covariance((xi[:, None] * psi)[:, None, :], 0, grid), 0)
            # the quadrature norm of psi is 1 up to O(1/M), so lambda_1 tracks the sample moment
            assert abs(eig.eigenvalues[0] - np.mean(xi**2)) < 0.01 * np.mean(xi**2)
            tops.append(eig.eigenvalues[0])
        assert abs(np.mean(tops) - 1.2) < 0.12


class TestSpectral:
    def test_rank_one(self):
        grid = uniform_grid(60)
        w = quadrature_weights(grid)
        v = 1 + grid**2
        v = v / np.sqrt(np.sum(w * v**2))
        eig = spectral_decompose(empirical_covariance(v[None, None, :], 0, grid), 0)
        assert eig.eigenvalues[0] == pytest.approx(1.0, abs=1e-10)
        assert np.all(np.abs(eig.eigenvalues[1:]) <= 1e-10)
        np.testing.assert_allclose(eig.eigenfunctions[0], v, atol=1e-8)
        assert eig.n_components == 1

    def test_analytic_recovery(self):
        grid = uniform_grid(100, 3)
        psi = sin_cos(grid)
        lam = np.array([1.2, 0.6])
        block = (psi.T * lam) @ psi
        cov = empirical_covariance(np.zeros((2, 1, 100)), 0, grid)
        cov.sigma_eta[0, 0] = block
        eig = spectral_decompose(cov, 0, n_components=2)
        np.testing.assert_allclose(eig.retained_values, lam, rtol=0.02)
        for l in range(2):
            f = eig.eigenfunctions[l]
            f = f if np.dot(f * eig.weights, psi[l]) >= 0 else -f
            assert l2_error(f, psi[l], eig.weights) <= 0.05

    def test_flat_spectrum(self):
        grid = (np.arange(80) + 0.5) / 80
        cov = empirical_covariance(np.zeros((2, 1, 80)), 0, grid)
        cov.sigma_eta[0, 0] = np.eye(80)
        eig = spectral_decompose(cov, 0, energy=0.9)
        assert eig.n_components >= 0.9 * 80
        np.testing.assert_allclose(eig.eigenvalues, 1 / 80, rtol=1e-10)

    def test_trace_reconstruction_orthonormality(self, rng):
        grid = uniform_grid(45, 4)
        cov = empirical_covariance(rng.normal(size=(70, 1, 45)).cumsum(axis=2), 2, grid)
        eig = spectral_decompose(cov, 0)
        w = eig.weights
        trace = np.sum(np.diag(cov.block(0)) * w)
        assert abs(eig.eigenvalues.sum() - trace) <= 1e-8 * max(1.0, trace)
        recon = (eig.eigenfunctions.T * eig.eigenvalues) @ eig.eigenfunctions
        np.testing.assert_allclose(recon, cov.block(0), atol=1e-8)
        gram = (eig.eigenfunctions * w) @ eig.eigenfunctions.T
        np.testing.assert_allclose(gram, np.eye(45), atol=1e-6)
        assert np.all(np.diff(eig.eigenvalues) <= 0) and np.all(eig.eigenvalues >= 0)
        np.testing.assert_allclose(eig.energy[-1], 1.0)

    def test_sign_convention(self, rng):
        grid = uniform_grid(45, 4)
        cov = empirical_covariance(rng.normal(size=(70, 1, 45)).cumsum(axis=2), 2, grid)
        a = spectral_decompose(cov, 0)
        b = spectral_decompose(cov, 0)
        np.testing.assert_array_equal(a.eigenfunctions, b.eigenfunctions)
        for f in a.eigenfunctions[:5]:
            integral = np.dot(a.weights, f)
            assert integral > 0 or (abs(integral) <= 1e-6 and f[np.argmax(np.abs(f))] > 0)

    def test_clipping(self):
        grid = np.linspace(0, 1, 5)
        cov = empirical_covariance(np.zeros((2, 1, 5)), 0, grid)
        cov.sigma_eta[0, 0] = -1e-13 * np.eye(5)
        eig = spectral_decompose(cov, 0)
        assert eig.n_clipped == 5 and np.all(eig.eigenvalues == 0) and eig.n_components == 0


class TestScores:
    def test_eigenfunction_score(self):
        grid = uniform_grid(100, 6)
        psi = sin_cos(grid)
        cov = empirical_covariance(np.zeros((2, 1, 100)), 0, grid)
        cov.sigma_eta[0, 0] = (psi.T * [1.2, 0.6]) @ psi
        eig = spectral_decompose(cov, 0, n_components=2)
        sc = compute_scores(eig.eigenfunctions[:1], eig, grid=grid)
        assert abs(sc[0, 0] - 1) <= 0.02
        assert np.all(compute_scores(np.zeros((3, 100)), eig, grid=grid) == 0)

    def test_riemann_formula(self, rng):
        grid = uniform_grid(30, 7)
        eta = rng.normal(size=(4, 1, 30))
        eig = spectral_decompose(empirical_covariance(eta, 0, grid), 0, n_components=2)
        sc = compute_scores(eta[:, 0], eig, grid=grid)
        ds = np.diff(np.concatenate([[0.0], grid]))
        expected = [[np.sum(eta[i, 0] * eig.eigenfunctions[l] * ds) for l in range(2)] for i in range(4)]
        np.testing.assert_allclose(sc, expected, atol=1e-12)

    def test_unknown_rule(self, rng):
        grid = uniform_grid(10)
        eig = spectral_decompose(empirical_covariance(rng.normal(size=(5, 1, 10)), 0, grid), 0)
        with pytest.raises(ValueError):
            compute_scores(np.zeros((1, 10)), eig, rule="simpson", grid=grid)


class TestCrossCovariance:
    def test_full_retention_reproduces_block(self, rng):
        grid = uniform_grid(25, 8)
        eta = rng.normal(size=(40, 1, 25))
        cov = empirical_covariance(eta, 1, grid)
        eig = spectral_decompose(cov, 0, n_components=25)
        sc = compute_scores(eta[:, 0], eig, rule="trapezoid", grid=grid)
        recon = cross_covariance_from_scores(sc, eig, sc, eig, 39)
        np.testing.assert_allclose(recon, cov.block(0), atol=1e-8)

    def test_shared_score_rank_one(self, rng):
        grid = uniform_grid(50, 9)
        fa, fb = sin_cos(grid)
        xi = rng.normal(size=200)
        eta = np.stack([np.outer(xi, fa), np.outer(xi, 2 * fb)], axis=1)
        cov = empirical_covariance(eta, 0, grid)
        e0 = spectral_decompose(cov, 0, n_components=1)
        e1 = spectral_decompose(cov, 1, n_components=1)
        s0 = compute_scores(eta[:, 0], e0, rule="trapezoid", grid=grid)
        s1 = compute_scores(eta[:, 1], e1, rule="trapezoid", grid=grid)
        recon = cross_covariance_from_scores(s0, e0, s1, e1, 200)
        np.testing.assert_allclose(recon, np.mean(xi**2) * np.outer(fa, 2 * fb), atol=1e-8)
        np.testing.assert_allclose(recon, cov.block(0, 1), atol=1e-8)

    def test_independent_responses(self):
        rng = np.random.default_rng(10)
        grid = uniform_grid(50, 10)
        psi = sin_cos(grid)
        n = 4000
        eta = np.stack([rng.normal(size=(n, 2)) @ psi, rng.normal(size=(n, 2)) @ psi[::-1]], axis=1)
        cov = empirical_covariance(eta, 0, grid)
        e0, e1 = spectral_decompose(cov, 0, 2), spectral_decompose(cov, 1, 2)
        s0 = compute_scores(eta[:, 0], e0, grid=grid)
        s1 = compute_scores(eta[:, 1], e1, grid=grid)
        # each entry is a sum of products of independent unit normals: sd about 2/sqrt(n)
        assert np.abs(cross_covariance_from_scores(s0, e0, s1, e1, n)).max() < 8 * 2 / np.sqrt(n)


class TestPipeline:
    def test_score_variance_matches_eigenvalue(self):
        data = generate_dataset(SimulationDesign(n=500, M=50, c=0.0), 17)
        curves = smooth_auto(data, fit_auto(data))
        pca = run_fpca(curves, data.p)
        for j in range(2):
            top = pca.systems[j].eigenvalues[0]
            var = np.sum(pca.scores[j][:, 0] ** 2) / (data.n - data.p)
            assert abs(var - top) < 0.15 * top
            block = pca.covariance.block(j)
            assert np.linalg.eigvalsh(block).min() >= -1e-10 * np.trace(block)
