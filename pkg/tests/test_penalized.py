"""Tests for the LASSO-penalized EM and the cross-validated penalty."""

from __future__ import annotations

from collections.abc import Callable

import numpy as np
import pytest
from pydantic import ValidationError

from mixquant.core.al_math import check_loss
from mixquant.core.data import PanelDataset, prepare
from mixquant.core.em import e_step, fit, initial_params
from mixquant.core.errors import DataValidationError
from mixquant.core.inference import simulate
from mixquant.core.models import FitOptions, MixtureParams, PenaltyConfig, QuantileConfig
from mixquant.core.mstep import exact_positive_step, m_step_positive, update_locations
from mixquant.core.penalized import (
    coordinate_descent,
    cross_validate_lambda,
    default_lambda_grid,
    fit_penalized,
    lambda_max,
    penalized_m_step_positive,
    soft_threshold,
    weighted_quantile,
)
from mixquant.core.seeding import spawn_generators


def random_quadratic(seed: int, p: int = 5) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(3 * p, p))
    return M.T @ M / p, rng.normal(size=p)


class TestSoftThreshold:
    """Tests for the soft-thresholding operator."""

    @pytest.mark.parametrize(
        ("x", "t", "expected"),
        [(3.0, 1.0, 2.0), (-3.0, 1.0, -2.0), (0.5, 1.0, 0.0), (-1.0, 1.0, 0.0), (2.0, 0.0, 2.0)],
    )
    def test_scalar(self, x: float, t: float, expected: float) -> None:
        assert soft_threshold(x, t) == expected

    def test_vectorized(self) -> None:
        np.testing.assert_array_equal(soft_threshold(np.array([-2.0, 0.1, 4.0]), 0.5), [-1.5, 0.0, 3.5])


class TestCoordinateDescent:
    """Tests for the LASSO solver on the quadratic surrogate."""

    def test_one_dimensional(self) -> None:
        """min a/2 b^2 - c b + lam |b| is (c - lam) / a for c > lam."""
        beta = coordinate_descent(np.array([[2.0]]), np.array([3.0]), 1.0)
        assert beta[0] == pytest.approx(1.0)

    def test_zero_penalty_solves_linear_system(self) -> None:
        A, c = random_quadratic(0)
        np.testing.assert_allclose(coordinate_descent(A, c, 0.0), np.linalg.solve(A, c), atol=1e-6)

    def test_subgradient_conditions(self) -> None:
        """Active slopes satisfy (A beta - c)_j = -lam sign(beta_j); inactive ones |c - A beta|_j <= lam."""
        A, c = random_quadratic(1)
        lam = 0.3
        beta = coordinate_descent(A, c, lam)
        grad = c - A @ beta

        active = beta != 0.0
        assert active.any()
        np.testing.assert_allclose(grad[active], lam * np.sign(beta[active]), atol=1e-6)
        assert np.all(np.abs(grad[~active]) <= lam + 1e-6)

    def test_large_penalty_zeroes_everything(self) -> None:
        A, c = random_quadratic(2)
        lam = float(np.max(np.abs(c)))
        np.testing.assert_array_equal(coordinate_descent(A, c, lam), 0.0)

    def test_uninformative_coordinate_is_zero(self) -> None:
        A = np.array([[0.0, 0.0], [0.0, 1.0]])
        beta = coordinate_descent(A, np.array([5.0, 2.0]), 0.5, beta0=np.array([7.0, 0.0]))
        np.testing.assert_allclose(beta, [0.0, 1.5])

    def test_sparsity_grows_with_penalty(self) -> None:
        """On a diagonal problem the number of nonzero slopes is non-increasing in lambda."""
        rng = np.random.default_rng(3)
        A = np.diag(rng.uniform(0.5, 2.0, size=8))
        c = rng.normal(size=8)
        counts = [np.count_nonzero(coordinate_descent(A, c, lam)) for lam in np.linspace(0.0, 4.0, 11)]
        assert all(b <= a for a, b in zip(counts, counts[1:], strict=False))
        assert counts[0] == 8
        assert counts[-1] == 0


class TestPenalizedMStep:
    """Tests for the penalized (beta, b1) update."""

    def test_zero_penalty_matches_closed_form(self, modest_panel: PanelDataset, median: QuantileConfig) -> None:
        data = prepare(modest_panel)
        start = initial_params(data, median, 2, np.random.default_rng(0))
        state = e_step(start, data, median)

        beta, b1 = penalized_m_step_positive(state, data, median, start, 0.0)
        expected_beta, expected_b1 = m_step_positive(state, data, median, start)

        np.testing.assert_array_equal(beta, expected_beta)
        np.testing.assert_array_equal(b1, expected_b1)

    def test_negative_penalty_rejected(self, modest_panel: PanelDataset, median: QuantileConfig) -> None:
        data = prepare(modest_panel)
        start = initial_params(data, median, 1, np.random.default_rng(0))
        with pytest.raises(ValueError, match="nonnegative"):
            penalized_m_step_positive(e_step(start, data, median), data, median, start, -1.0)

    def test_locations_follow_penalized_slopes(self, modest_panel: PanelDataset, median: QuantileConfig) -> None:
        data = prepare(modest_panel)
        start = initial_params(data, median, 2, np.random.default_rng(0))
        state = e_step(start, data, median)

        beta, b1 = penalized_m_step_positive(state, data, median, start, 1e6)

        np.testing.assert_array_equal(beta, 0.0)
        np.testing.assert_allclose(b1, update_locations(state, data, median, beta, start.b1))

    def test_lambda_max_is_the_zeroing_threshold(self, modest_panel: PanelDataset, median: QuantileConfig) -> None:
        """At lambda_max the first exact M-step zeroes beta; below it some slope survives."""
        data = prepare(modest_panel)
        options = FitOptions(seed=4)
        lam_max = lambda_max(data, median, 2, options)
        start = initial_params(data, median, 2, spawn_generators(options.seed, 1)[0])
        state = e_step(start, data, median)

        at_max, _ = exact_positive_step(state, data, median, start, lam_max * (1.0 + 1e-6))
        below, _ = exact_positive_step(state, data, median, start, 0.5 * lam_max)

        assert lam_max > 0.0
        np.testing.assert_array_equal(at_max, 0.0)
        assert np.count_nonzero(below) > 0

    def test_closed_form_lambda_max_is_the_zeroing_threshold(self, modest_panel: PanelDataset, median: QuantileConfig) -> None:
        data = prepare(modest_panel)
        options = FitOptions(seed=4, positive_update="closed_form")
        lam_max = lambda_max(data, median, 2, options)
        start = initial_params(data, median, 2, spawn_generators(options.seed, 1)[0])
        state = e_step(start, data, median)

        at_max, _ = penalized_m_step_positive(state, data, median, start, lam_max * (1.0 + 1e-9))
        below, _ = penalized_m_step_positive(state, data, median, start, 0.5 * lam_max)

        assert lam_max > 0.0
        np.testing.assert_array_equal(at_max, 0.0)
        assert np.count_nonzero(below) > 0

    @pytest.mark.parametrize("tau", [0.25, 0.5, 0.75])
    def test_weighted_quantile_minimizes_the_check_loss(self, tau: float) -> None:
        rng = np.random.default_rng(2)
        values = rng.normal(size=40)
        weights = rng.uniform(0.1, 2.0, size=40)

        q = weighted_quantile(values, weights, tau)

        at = (weights * check_loss(values - q, tau)).sum()
        assert q in values
        assert all(at <= (weights * check_loss(values - other, tau)).sum() + 1e-10 for other in values)


class TestFitPenalized:
    """Tests for the penalized multi-start fit."""

    def test_zero_penalty_equals_unpenalized_fit(self, modest_panel: PanelDataset, median: QuantileConfig) -> None:
        data = prepare(modest_panel)
        options = FitOptions(n_starts=3, seed=2)

        plain = fit(data, median, 2, options)
        penalized = fit_penalized(data, median, 2, 0.0, options)

        np.testing.assert_array_equal(plain.params.to_vector(), penalized.params.to_vector())
        assert penalized.lam == 0.0
        assert plain.lam is None

    @pytest.mark.parametrize("lam", [0.5, 5.0])
    def test_penalized_objective_is_monotone(self, modest_panel: PanelDataset, median: QuantileConfig, lam: float) -> None:
        result = fit_penalized(prepare(modest_panel), median, 2, lam, FitOptions(n_starts=2))

        trace = np.array(result.objective_trace)
        assert np.all(np.diff(trace) >= -1e-8 * max(1.0, abs(trace[-1])))
        penalty = lam * np.abs(result.params.beta).sum()
        assert trace[-1] == pytest.approx(result.loglik - penalty)

    def test_parameter_count_uses_nonzero_slopes(self, modest_panel: PanelDataset, median: QuantileConfig) -> None:
        result = fit_penalized(prepare(modest_panel), median, 2, 1e6, FitOptions(n_starts=2))

        np.testing.assert_array_equal(result.params.beta, 0.0)
        # gamma + sigma + b0, b1 + free masses
        assert result.n_parameters == 1 + 1 + 4 + 1

    def test_negative_penalty_rejected(self, modest_panel: PanelDataset, median: QuantileConfig) -> None:
        with pytest.raises(ValueError, match="nonnegative"):
            fit_penalized(prepare(modest_panel), median, 2, -0.1)


class TestLambdaGrid:
    """Tests for the derived penalty grid."""

    def test_geometric_and_ascending(self) -> None:
        grid = default_lambda_grid(2.0, n_values=5)
        assert len(grid) == 5
        assert grid[0] == pytest.approx(2e-3)
        assert grid[-1] == pytest.approx(2.0)
        ratios = np.array(grid[1:]) / np.array(grid[:-1])
        np.testing.assert_allclose(ratios, ratios[0])

    def test_degenerate_maximum(self) -> None:
        assert default_lambda_grid(0.0) == [0.0]

    def test_no_positive_covariates(self, template_factory: Callable[..., PanelDataset], median: QuantileConfig) -> None:
        data = prepare(template_factory(10, 2, 1, 0))
        assert lambda_max(data, median, 2) == 0.0

    def test_penalty_config_rejects_unsorted_grid(self) -> None:
        with pytest.raises(ValidationError):
            PenaltyConfig(lambda_grid=[1.0, 0.5])


class TestCrossValidation:
    """Tests for unit-level cross-validation of the penalty."""

    def test_single_value_grid(self, modest_panel: PanelDataset, median: QuantileConfig) -> None:
        lam, rows = cross_validate_lambda(
            prepare(modest_panel), median, 2, PenaltyConfig(lambda_grid=[0.1], n_folds=3), FitOptions(n_starts=2)
        )
        assert lam == 0.1
        assert len(rows) == 1
        assert rows[0].selected

    def test_table_shape_and_selection(self, modest_panel: PanelDataset, median: QuantileConfig) -> None:
        grid = [0.0, 0.05, 0.5]
        lam, rows = cross_validate_lambda(
            prepare(modest_panel), median, 2, PenaltyConfig(lambda_grid=grid, n_folds=3, fold_seed=1), FitOptions(n_starts=2)
        )

        assert [row.lam for row in rows] == grid
        assert all(len(row.fold_losses) == 3 for row in rows)
        assert sum(row.selected for row in rows) == 1
        means = [row.mean_loss for row in rows]
        # ties go to the largest lambda
        assert lam == max(grid[j] for j, mean in enumerate(means) if mean == min(means))
        assert all(row.se >= 0.0 for row in rows)

    def test_one_se_rule_prefers_larger_penalty(self, modest_panel: PanelDataset, median: QuantileConfig) -> None:
        data = prepare(modest_panel)
        grid = [0.0, 0.05, 0.5, 5.0]
        options = FitOptions(n_starts=2)
        plain, _ = cross_validate_lambda(data, median, 2, PenaltyConfig(lambda_grid=grid, n_folds=3), options)
        sparse, _ = cross_validate_lambda(data, median, 2, PenaltyConfig(lambda_grid=grid, n_folds=3, one_se_rule=True), options)
        assert sparse >= plain

    def test_workers_do_not_change_losses(self, modest_panel: PanelDataset, median: QuantileConfig) -> None:
        data = prepare(modest_panel)
        pcfg = PenaltyConfig(lambda_grid=[0.0, 0.5], n_folds=3)
        _, serial = cross_validate_lambda(data, median, 2, pcfg, FitOptions(n_starts=2))
        _, threaded = cross_validate_lambda(data, median, 2, pcfg, FitOptions(n_starts=2, n_workers=3))
        assert [row.fold_losses for row in serial] == [row.fold_losses for row in threaded]

    def test_more_folds_than_units(self, small_panel: PanelDataset, median: QuantileConfig) -> None:
        with pytest.raises(DataValidationError, match="folds"):
            cross_validate_lambda(prepare(small_panel), median, 1, PenaltyConfig(lambda_grid=[0.1], n_folds=5))

    @pytest.mark.slow
    def test_cross_validated_penalty_zeroes_null_slopes(self, template_factory: Callable[..., PanelDataset], median: QuantileConfig) -> None:
        """With five true-zero slopes out of ten, the CV-selected fit sets at least 80% of them to exactly zero."""
        truth = MixtureParams(
            gamma=[0.5],
            beta=[1.0, -0.8, 0.6, -0.5, 0.7, 0.0, 0.0, 0.0, 0.0, 0.0],
            sigma=0.3,
            b0=[-1.0, 0.2],
            b1=[0.0, 2.5],
            pi=[0.5, 0.5],
        )
        zeroed = []
        for replicate in range(20):
            panel = simulate(truth, template_factory(200, 4, 1, 10, seed=400 + replicate), median, seed=replicate)
            data = prepare(panel)
            options = FitOptions(n_starts=3, seed=replicate)
            base = fit(data, median, 2, options)
            grid = default_lambda_grid(lambda_max(data, median, 2, options), 20)
            pcfg = PenaltyConfig(lambda_grid=grid, n_folds=5, fold_seed=replicate, one_se_rule=True)

            lam, _ = cross_validate_lambda(data, median, 2, pcfg, options)
            result = fit_penalized(data, median, 2, lam, options.model_copy(update={"start": base.params}))

            zeroed.extend((result.params.beta[5:] == 0.0).tolist())
        assert np.mean(zeroed) >= 0.8
