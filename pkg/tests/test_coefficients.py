import numpy as np
import pytest

from mvcm.coefficients import (BandwidthSelectionError, cross_validate_bandwidth, default_cv_candidates,
                               estimate_coefficients, fit_auto, leave_one_curve_out_predictions,
                               pick_minimum, pointwise_ols)
from mvcm.data import validate_dataset
from mvcm.kernels import BandwidthError, moment_u
from mvcm.simulation import SimulationDesign, generate_dataset

from conftest import noiseless_dataset
from oracles import naive_pooled_wls


def linear_truth(s):
    return np.stack([np.stack([1 + s, 2 - s, 0.5 * s])])


def quadratic_truth(s):
    return np.stack([np.stack([s**2, np.zeros_like(s), np.zeros_like(s)])])


class TestPointwiseOLS:
    def test_matches_lstsq(self, example_data):
        beta = pointwise_ols(example_data)
        m = 7
        ref, *_ = np.linalg.lstsq(example_data.x, example_data.y[:, 1, m], rcond=None)
        np.testing.assert_allclose(beta[1, :, m], ref, atol=1e-10)


class TestAgainstNaiveWLS:
    def test_random_points(self, example_data, rng):
        data = example_data.subset(np.arange(25))
        pts = np.sort(rng.uniform(0, 1, 5))
        h = np.array([0.15, 0.22])
        fit = estimate_coefficients(data, h, eval_points=pts, with_bias=False)
        for j in range(data.J):
            for e, s in enumerate(pts):
                vec_a = naive_pooled_wls(data.grid, data.y[:, j, :], data.x, s, h[j])
                np.testing.assert_allclose(fit.a_hat[j, e], vec_a, atol=1e-8)
                np.testing.assert_allclose(fit.b_hat[j, :, e], vec_a[0::2], atol=1e-8)

    def test_grid_default(self, example_data):
        fit = estimate_coefficients(example_data, 0.2, with_bias=False)
        np.testing.assert_array_equal(fit.eval_points, example_data.grid)
        np.testing.assert_allclose(fit.b_hat, fit.b_hat_grid)
        resid = example_data.y - np.einsum("il,jlm->ijm", example_data.x, fit.b_hat_grid)
        np.testing.assert_allclose(fit.residuals, resid, atol=1e-12)


class TestExactness:
    def test_noiseless_linear(self):
        data = noiseless_dataset(linear_truth)
        pts = [0.0, 0.31, 1.0]
        fit = estimate_coefficients(data, 0.2, eval_points=pts)
        np.testing.assert_allclose(fit.b_hat, linear_truth(np.array(pts)), atol=1e-8)
        np.testing.assert_allclose(fit.bias_hat, 0.0, atol=1e-8)

    def test_bias_quadratic(self):
        grid = np.linspace(0, 1, 200)
        x = np.column_stack([np.ones(20), np.random.default_rng(1).normal(size=(20, 2))])
        y = np.einsum("ip,jpm->ijm", x, quadratic_truth(grid))
        data = validate_dataset(grid, y, x)
        h = 0.1
        fit = estimate_coefficients(data, h, eval_points=[0.5])
        target = h**2 * moment_u("epanechnikov", 2)      # 0.5 * B'' * h^2 u2 with B'' = 2
        assert abs(fit.bias_hat[0, 0, 0] - target) < 0.25 * target
        # for a quadratic the local linear error equals the plug-in bias exactly
        err = fit.b_hat[0, 0, 0] - 0.25
        assert abs(err - fit.bias_hat[0, 0, 0]) < 1e-8
        assert abs(fit.corrected[0, 0, 0] - 0.25) < 1e-8

    def test_pilot_derivatives_cubic(self):
        def cubic(s):
            return np.stack([np.stack([s**3, s**2, np.zeros_like(s)])])
        data = noiseless_dataset(cubic, M=80)
        fit = estimate_coefficients(data, 0.15, eval_points=[0.4, 0.6])
        np.testing.assert_allclose(fit.pilot.d3[0, 0], 6.0, atol=1e-6)
        np.testing.assert_allclose(fit.pilot.d2[0, 1], 2.0, atol=1e-6)
        np.testing.assert_allclose(fit.corrected[0, :2], cubic(np.array([0.4, 0.6]))[0, :2], atol=1e-8)


class TestEquivariance:
    def test_covariate_scaling(self, example_data):
        a = np.array([1.0, 3.0, -0.5])
        scaled = validate_dataset(example_data.grid, example_data.y, example_data.x * a)
        f0 = estimate_coefficients(example_data, 0.2)
        f1 = estimate_coefficients(scaled, 0.2)
        np.testing.assert_allclose(f1.b_hat, f0.b_hat / a[None, :, None], atol=1e-10)
        np.testing.assert_allclose(f1.bias_hat, f0.bias_hat / a[None, :, None], atol=1e-10)

    def test_constant_shift(self, example_data):
        shifted = example_data.x.copy()
        shifted[:, 1] += 2.5
        f0 = estimate_coefficients(example_data, 0.2)
        f1 = estimate_coefficients(validate_dataset(example_data.grid, example_data.y, shifted), 0.2)
        np.testing.assert_allclose(f1.b_hat[:, 1:], f0.b_hat[:, 1:], atol=1e-10)
        np.testing.assert_allclose(f1.b_hat[:, 0], f0.b_hat[:, 0] - 2.5 * f0.b_hat[:, 1], atol=1e-10)
        np.testing.assert_allclose(f1.residuals, f0.residuals, atol=1e-10)

    def test_constant_added_to_curves(self, example_data):
        y = example_data.y.copy()
        y[:, 1, :] += 0.75
        f0 = estimate_coefficients(example_data, 0.2)
        f1 = estimate_coefficients(example_data.with_responses(y), 0.2)
        np.testing.assert_allclose(f1.b_hat[1, 0], f0.b_hat[1, 0] + 0.75, atol=1e-10)
        np.testing.assert_allclose(f1.b_hat[1, 1:], f0.b_hat[1, 1:], atol=1e-10)
        np.testing.assert_allclose(f1.b_hat[0], f0.b_hat[0], atol=1e-12)

    def test_subject_order(self, example_data, rng):
        perm = rng.permutation(example_data.n)
        f0 = estimate_coefficients(example_data, [0.2, 0.3])
        f1 = estimate_coefficients(example_data.subset(perm), [0.2, 0.3])
        np.testing.assert_allclose(f1.b_hat, f0.b_hat, atol=1e-12)
        np.testing.assert_allclose(f1.bias_hat, f0.bias_hat, atol=1e-12)
        np.testing.assert_allclose(f1.residuals, f0.residuals[perm], atol=1e-12)

    def test_residual_identity(self, example_data):
        fit = estimate_coefficients(example_data, 0.2, eval_points=[0.25, 0.5])
        fitted = np.einsum("il,jlm->ijm", example_data.x, fit.b_hat_grid)
        np.testing.assert_allclose(fit.residuals + fitted, example_data.y, atol=1e-10)

    def test_bad_bandwidth(self, example_data):
        with pytest.raises(BandwidthError):
            estimate_coefficients(example_data, [0.1, -0.1])


class TestMonteCarlo:
    def test_b13_midpoint_unbiased(self):
        design = SimulationDesign(n=200, M=50, c=1.0)
        est = []
        for rep in range(500):
            data = generate_dataset(design, [7, rep])
            est.append(estimate_coefficients(data, 0.15, eval_points=[0.5]).corrected[0, 2, 0])
        assert abs(np.mean(est) - 0.6) < 0.02


    def test_noise_only_intercept_bias(self):
        rng = np.random.default_rng(8)
        grid = np.linspace(0, 1, 40)
        x = np.column_stack([np.ones(50), rng.normal(size=50)])
        bias = []
        for _ in range(200):
            data = validate_dataset(grid, rng.normal(size=(50, 1, 40)), x)
            bias.append(estimate_coefficients(data, 0.2, eval_points=[0.5]).bias_hat[0, 0, 0])
        bias = np.array(bias)
        assert abs(bias.mean()) < 4 * bias.std() / np.sqrt(bias.size)


class TestCrossValidation:
    def test_loo_matches_refits(self, example_data):
        data = example_data.subset(np.arange(15))
        h = 0.2
        fast = leave_one_curve_out_predictions(data, 1, h)
        for i in range(data.n):
            rest = data.subset(np.delete(np.arange(data.n), i))
            fit = estimate_coefficients(rest, h, with_bias=False)
            np.testing.assert_allclose(fast[i], data.x[i] @ fit.b_hat[1], atol=1e-10)

    def test_scores_match_enumeration(self, example_data):
        data = example_data.subset(np.arange(12))
        cands = [0.12, 0.2, 0.35]
        h, table = cross_validate_bandwidth(data, 0, cands)
        for k, hk in enumerate(cands):
            sq = 0.0
            for i in range(data.n):
                rest = data.subset(np.delete(np.arange(data.n), i))
                pred = data.x[i] @ estimate_coefficients(rest, hk, with_bias=False).b_hat[0]
                sq += np.sum((data.y[i, 0] - pred) ** 2)
            assert abs(table.scores[k] - sq / (data.n * data.M)) < 1e-10
        assert h == cands[int(np.argmin(table.scores))]

    def test_noiseless_tie_picks_largest(self):
        data = noiseless_dataset(linear_truth)
        h, table = cross_validate_bandwidth(data, 0)
        np.testing.assert_allclose(table.scores, 0.0, atol=1e-20)
        assert h == table.candidates.max()

    def test_pick_minimum(self):
        assert pick_minimum(np.array([0.1, 0.2, 0.3]), np.array([2.0, 1.0, 1.0 + 1e-12]), 1.0) == 0.3
        assert pick_minimum(np.array([0.1, 0.2, 0.3]), np.array([2.0, 1.0, np.nan]), 1.0) == 0.2

    def test_degenerate_candidates(self, example_data):
        with pytest.raises(BandwidthSelectionError):
            cross_validate_bandwidth(example_data, 0, [1e-5])
        with pytest.raises(BandwidthSelectionError):
            cross_validate_bandwidth(example_data, 0, [])

    def test_candidates_cover_grid(self, example_data):
        c = default_cv_candidates(example_data.grid)
        assert c.size == 20 and np.all(np.diff(c) > 0)
        assert c[0] == pytest.approx(2 * np.max(np.diff(example_data.grid)))

    def test_interior_selection(self):
        design = SimulationDesign(n=200, M=50, c=1.0)
        cands = np.geomspace(0.02, 0.5, 20)
        interior = np.zeros(2)
        for rep in range(50):
            data = generate_dataset(design, [3, rep])
            for j in range(data.J):
                h, _ = cross_validate_bandwidth(data, j, cands)
                interior[j] += cands[0] < h < cands[-1]
        assert np.all(interior / 50 >= 0.9)

    def test_toy_enumeration(self):
        rng = np.random.default_rng(5)
        grid = np.array([0.1, 0.4, 0.6, 0.9])
        x = np.column_stack([np.ones(3), [0.0, 1.0, 3.0]])
        data = validate_dataset(grid, rng.normal(size=(3, 1, 4)), x)
        cands = [0.45, 0.9]
        # each (-i) fit leaves two subjects, two covariates: solve the normal equations directly
        scores = []
        for h in cands:
            sq = 0.0
            for i in range(3):
                keep = [k for k in range(3) if k != i]
                for m, s in enumerate(grid):
                    a = naive_pooled_wls(grid, data.y[keep, 0, :], x[keep], s, h)
                    sq += (data.y[i, 0, m] - x[i] @ a[0::2]) ** 2
            scores.append(sq / 12)
        h, table = cross_validate_bandwidth(data, 0, cands)
        np.testing.assert_allclose(table.scores, scores, rtol=1e-10)
        assert h == cands[int(np.argmin(scores))]

    def test_fit_auto_records_tables(self, example_data):
        fit = fit_auto(example_data)
        assert set(fit.cv_tables) == {0, 1}
        for j, t in fit.cv_tables.items():
            assert fit.bandwidths[j] in t.candidates
