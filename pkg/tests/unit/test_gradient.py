import numpy as np
import pytest
from pydantic import ValidationError

from gradfield.errors import CompositionError, DuplicateLocationError, FactorizationError
from gradfield.gradient import (
    ConditionalGaussian,
    PredictionTargets,
    composition_sample,
    conditional_gradient_distribution,
    draw_joint_gradients,
    krige_covariate,
    kriging_mean,
    run_composition,
)
from gradfield.kernel import UnitVector, local_cov_block
from gradfield.model import Dataset, PosteriorChain


class TestPredictionTargets:
    def test_flags_broadcast(self):
        # Act
        targets = PredictionTargets.at([[0, 0], [1, 1]], level=False)

        # Assert
        assert targets.want_level.tolist() == [False, False]
        assert targets.want_gradient.tolist() == [True, True]

    def test_columns_for_gradients_only(self):
        # Arrange
        targets = PredictionTargets.at([[0, 0], [1, 1]], level=False)

        # Act
        cols = targets.columns()

        # Assert
        # m = 2: Y at 0..1, X at 2..3, grad Y at 4..7, grad X at 8..11
        assert cols.tolist() == [4, 5, 6, 7, 8, 9, 10, 11]

    def test_nothing_requested_rejected(self):
        with pytest.raises(ValidationError):
            PredictionTargets.at([[0, 0]], level=False, gradient=False)

    def test_coincident_target_offset(self):
        # Arrange
        targets = PredictionTargets.at([[1.0, 1.0], [2.0, 2.0]], offset_coincident=True)
        observed = np.array([[1.0, 1.0], [3.0, 0.0]])

        # Act
        resolved = targets.resolve(observed)

        # Assert
        np.testing.assert_allclose(resolved, [[1.0 + 1e-6, 1.0], [2.0, 2.0]])


class TestConditionalDistribution:
    def test_unconditional_law_is_local_block(self, truths):
        # Arrange
        targets = PredictionTargets.at([[0.5, 0.5]])

        # Act
        dist = conditional_gradient_distribution(truths, None, targets)

        # Assert
        np.testing.assert_allclose(dist.cov, local_cov_block(truths).matrix, atol=1e-12)
        np.testing.assert_allclose(dist.mean, 0.0, atol=1e-15)

    def test_conditioning_shrinks_variance(self, truths, small_data):
        # Arrange
        targets = PredictionTargets.at([[2.5, 2.5]], level=False)

        # Act
        prior = conditional_gradient_distribution(truths, None, targets)
        post = conditional_gradient_distribution(truths, small_data, targets)

        # Assert
        assert np.all(np.diag(post.cov) < np.diag(prior.cov))
        assert np.all(np.diag(post.cov) > 0)

    def test_target_on_observation_rejected(self, truths, small_data):
        # Arrange
        targets = PredictionTargets.at(small_data.locations[:1])

        # Act & Assert
        with pytest.raises(DuplicateLocationError):
            conditional_gradient_distribution(truths, small_data, targets)

    def test_gradient_mean_equals_derivative_of_kriging_mean(self, truths, small_data):
        # Arrange
        points = np.random.default_rng(3).uniform(0.5, 4.5, (20, 2))
        dist = conditional_gradient_distribution(truths, small_data, PredictionTargets.at(points, level=False))
        grad_y = dist.mean[dist.select(["grad_y"])].reshape(-1, 2)
        h = 1e-5

        # Act
        numeric = np.column_stack(
            [
                (kriging_mean(truths, small_data, points + h * e)[:, 0] - kriging_mean(truths, small_data, points - h * e)[:, 0])
                / (2 * h)
                for e in np.eye(2)
            ]
        )

        # Assert
        rel = np.linalg.norm(grad_y - numeric, axis=1) / np.maximum(np.linalg.norm(numeric, axis=1), 1e-2)
        assert rel.max() < 1e-4

    def test_kriging_interpolates_observations(self, truths, small_data):
        # Arrange
        near = small_data.locations[:5] + 1e-7

        # Act
        mean = kriging_mean(truths, small_data, near)

        # Assert
        np.testing.assert_allclose(mean[:, 1], small_data.x[:5], atol=1e-3)
        np.testing.assert_allclose(mean[:, 0], small_data.y[:5], atol=1e-3)

    def test_covariate_only_data_ignores_response(self, truths, small_data):
        # Arrange
        x_only = Dataset(locations=small_data.locations, x=small_data.x)
        points = np.array([[1.2, 3.3], [4.1, 0.7]])

        # Act
        full = kriging_mean(truths.model_copy(update={"beta1": 0.0}), x_only, points)
        krig = krige_covariate(PosteriorChain(samples=[truths] * 3), small_data, points)

        # Assert
        np.testing.assert_allclose(krig, full[:, 1], rtol=1e-10)

    def test_level_marginal_independent_of_gradient_request(self, truths, small_data):
        # Arrange
        points = [[1.2, 3.3], [4.1, 0.7], [2.6, 2.4]]
        full = conditional_gradient_distribution(truths, small_data, PredictionTargets.at(points))
        levels = conditional_gradient_distribution(truths, small_data, PredictionTargets.at(points, gradient=False))

        # Act
        keep = full.select(["y", "x"])

        # Assert
        np.testing.assert_allclose(full.mean[keep], levels.mean, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(full.cov[np.ix_(keep, keep)], levels.cov, rtol=1e-10, atol=1e-12)

    def test_level_variance_vanishes_toward_an_observation(self, truths, small_data):
        # Arrange
        locations = small_data.locations
        gaps = np.linalg.norm(locations[:, None, :] - locations[None, :, :], axis=-1)
        np.fill_diagonal(gaps, np.inf)
        nearest = gaps.min(axis=1)
        site = int(np.argmax(nearest))
        offsets = nearest[site] * np.array([0.25, 0.1, 0.05, 0.02, 0.01, 0.005])

        # Act
        variances = np.array(
            [
                np.diag(
                    conditional_gradient_distribution(
                        truths,
                        small_data,
                        PredictionTargets.at([locations[site] + [d, 0.0]], gradient=False),
                    ).cov
                )
                for d in offsets
            ]
        )

        # Assert
        # columns are Var Y(t), Var X(t)
        assert np.all(np.diff(variances, axis=0) < 0)
        assert np.all(variances[-1] < 1e-3)
        assert np.all(variances[-1] >= 0)


class TestDraws:
    def test_zero_covariance_returns_mean(self):
        # Arrange
        dist = ConditionalGaussian(
            mean=np.arange(6, dtype=float),
            cov=np.zeros((6, 6)),
            locations=np.zeros((1, 2)),
            columns=np.arange(6),
        )

        # Act
        draw = draw_joint_gradients(dist, seed=1)

        # Assert
        np.testing.assert_array_equal(draw.grad_y[0], [2.0, 3.0])
        np.testing.assert_array_equal(draw.grad_x[0], [4.0, 5.0])

    def test_unrequested_components_are_nan(self, truths):
        # Arrange
        dist = conditional_gradient_distribution(truths, None, PredictionTargets.at([[0.0, 0.0]], level=False))

        # Act
        draw = draw_joint_gradients(dist, seed=2)

        # Assert
        assert np.isnan(draw.y).all() and np.isnan(draw.x).all()
        assert np.isfinite(draw.grad_y).all()

    def test_directional_derivatives(self, truths):
        # Arrange
        dist = conditional_gradient_distribution(truths, None, PredictionTargets.at([[0.0, 0.0]]))
        draw = draw_joint_gradients(dist, seed=4)
        u = UnitVector(u1=0.0, u2=1.0)

        # Act
        dy, dx = draw.directional(u)

        # Assert
        assert dy[0] == draw.grad_y[0, 1]
        assert dx[0] == draw.grad_x[0, 1]

    def test_draws_match_conditional_moments(self, truths, small_data):
        # Arrange
        dist = conditional_gradient_distribution(truths, small_data, PredictionTargets.at([[2.5, 2.5]]))
        rng = np.random.default_rng(17)
        n_draws = 100_000

        # Act
        draws = np.array(
            [
                np.concatenate([d.y, d.x, d.grad_y.ravel(), d.grad_x.ravel()])
                for d in (draw_joint_gradients(dist, rng) for _ in range(n_draws))
            ]
        )
        mean = draws.mean(axis=0)
        cov = np.cov(draws, rowvar=False)

        # Assert
        var = np.diag(dist.cov)
        assert np.all(np.abs(mean - dist.mean) < 5.0 * np.sqrt(var / n_draws))
        cov_se = np.sqrt((np.outer(var, var) + dist.cov**2) / n_draws)
        assert np.all(np.abs(cov - dist.cov) < 5.0 * cov_se)


class TestComposition:
    def test_independent_of_thread_count(self, truth_chain, small_data):
        # Arrange
        targets = PredictionTargets.at([[1.0, 1.5], [3.0, 2.0]], level=False)

        # Act
        serial = composition_sample(truth_chain, small_data, targets, seed=7, n_workers=1)
        threaded = composition_sample(truth_chain, small_data, targets, seed=7, n_workers=4)

        # Assert
        np.testing.assert_array_equal(serial.stack("grad_y"), threaded.stack("grad_y"))
        np.testing.assert_array_equal(serial.stack("grad_x"), threaded.stack("grad_x"))

    def test_one_draw_per_posterior_sample(self, truth_chain, small_data):
        # Arrange
        targets = PredictionTargets.at([[1.0, 1.5]])

        # Act
        result = composition_sample(truth_chain, small_data, targets, seed=1)

        # Assert
        assert len(result) == len(truth_chain)
        assert [d.theta_index for d in result] == list(range(len(truth_chain)))
        assert result.stack("grad_y").shape == (len(truth_chain), 1, 2)

    def test_mean_only_draws_are_identical(self, truth_chain, small_data):
        # Arrange
        targets = PredictionTargets.at([[1.0, 1.5]])

        # Act
        result = composition_sample(truth_chain, small_data, targets, seed=1, mean_only=True)

        # Assert
        grads = result.stack("grad_y")
        np.testing.assert_array_equal(grads[0], grads[-1])

    def test_too_many_failures_raise(self, truths):
        # Arrange
        dist = conditional_gradient_distribution(truths, None, PredictionTargets.at([[0.0, 0.0]]))

        def conditional_for(index: int):
            if index % 10 == 0:
                raise FactorizationError("indefinite")
            return dist

        # Act & Assert
        with pytest.raises(CompositionError):
            run_composition(50, conditional_for, seed=0)

    def test_rare_failures_are_recorded(self, truths):
        # Arrange
        dist = conditional_gradient_distribution(truths, None, PredictionTargets.at([[0.0, 0.0]]))

        def conditional_for(index: int):
            if index == 3:
                raise FactorizationError("indefinite")
            return dist

        # Act
        result = run_composition(200, conditional_for, seed=0)

        # Assert
        assert result.failed == [3]
        assert result.n_failed == 1
        assert len(result) == 199
