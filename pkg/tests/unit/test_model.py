import math

import numpy as np
import pytest
from pydantic import ValidationError
from scipy.stats import multivariate_normal

from gradfield.errors import InitializationError
from gradfield.model import (
    PARAM_NAMES,
    Dataset,
    InverseGammaPrior,
    McmcConfig,
    MetropolisBlock,
    NormalPrior,
    PosteriorChain,
    PriorSpec,
    ThetaSample,
    UniformPrior,
    fit_mcmc,
    level_covariance,
    log_likelihood,
    log_likelihood_terms,
    simulate_bivariate_gp,
    uniform_locations,
)
from gradfield.utils import batch_means_se


class TestDataset:
    def test_covariate_only_dataset(self):
        # Act
        data = Dataset(locations=[[0, 0], [1, 0], [0, 1]], x=[0.1, 0.2, 0.3])

        # Assert
        assert data.y is None
        assert data.n == 3

    def test_rejects_fewer_than_three_sites(self):
        with pytest.raises(ValidationError):
            Dataset(locations=[[0, 0], [1, 0]], x=[0.1, 0.2], y=[1.0, 2.0])

    def test_rejects_duplicate_locations(self):
        with pytest.raises(ValidationError, match="coincide"):
            Dataset(locations=[[0, 0], [1, 0], [0, 0]], x=[0.1, 0.2, 0.3], y=[1, 2, 3])

    def test_rejects_non_finite_values(self):
        with pytest.raises(ValidationError):
            Dataset(locations=[[0, 0], [1, 0], [0, 1]], x=[0.1, np.nan, 0.3])

    def test_rejects_length_mismatch(self):
        with pytest.raises(ValidationError):
            Dataset(locations=[[0, 0], [1, 0], [0, 1]], x=[0.1, 0.2, 0.3], y=[1.0, 2.0])

    def test_subset_keeps_rows_together(self, small_data):
        # Act
        sub = small_data.subset([0, 5, 7])

        # Assert
        np.testing.assert_array_equal(sub.locations, small_data.locations[[0, 5, 7]])
        np.testing.assert_array_equal(sub.y, small_data.y[[0, 5, 7]])


class TestPriors:
    def test_normal_log_pdf(self):
        # Arrange
        prior = NormalPrior(mean=1.0, var=4.0)

        # Act & Assert
        assert prior.log_pdf(1.0) == pytest.approx(-0.5 * math.log(2 * math.pi * 4.0))

    def test_point_mass_normal_is_pinned(self):
        # Arrange
        priors = PriorSpec(beta0=NormalPrior(mean=0.3, var=0.0))

        # Act & Assert
        assert priors.pinned() == {"beta0": 0.3}

    def test_inverse_gamma_outside_support(self):
        assert InverseGammaPrior().log_pdf(-1.0) == -math.inf

    def test_uniform_bounds_checked(self):
        with pytest.raises(ValidationError):
            UniformPrior(lower=2.0, upper=1.0)

    def test_uniform_log_pdf(self):
        # Arrange
        prior = UniformPrior(lower=0.5, upper=10.0)

        # Act & Assert
        assert prior.log_pdf(1.0) == pytest.approx(-math.log(9.5))
        assert prior.log_pdf(11.0) == -math.inf

    def test_fixed_names_checked(self):
        with pytest.raises(ValidationError):
            PriorSpec(fixed={"gamma": 1.0})


class TestMcmcConfig:
    def test_default_retains_two_thousand(self):
        assert McmcConfig().n_retained == 2000

    def test_burn_in_must_precede_end(self):
        with pytest.raises(ValidationError):
            McmcConfig(iterations=100, burn_in=100)

    def test_retained_iterations(self):
        # Arrange
        cfg = McmcConfig(iterations=20, burn_in=10, thin=5)

        # Act
        kept = [i for i in range(cfg.iterations) if cfg.is_retained(i)]

        # Assert
        assert kept == [14, 19]
        assert len(kept) == cfg.n_retained


class TestLikelihood:
    def test_matches_dense_multivariate_normal(self, truths, small_data):
        # Arrange
        cov = level_covariance(small_data.locations, truths)
        n = small_data.n
        mean = np.concatenate(
            [
                np.full(n, truths.beta0 + truths.beta1 * truths.alpha0),
                np.full(n, truths.alpha0),
            ]
        )

        # Act
        value = log_likelihood(truths, small_data)

        # Assert
        expected = multivariate_normal(mean=mean, cov=cov).logpdf(np.concatenate([small_data.y, small_data.x]))
        assert value == pytest.approx(expected, rel=1e-8)

    def test_covariate_only_has_no_response_term(self, truths, small_data):
        # Arrange
        x_only = Dataset(locations=small_data.locations, x=small_data.x)

        # Act
        x_term, y_term = log_likelihood_terms(truths, x_only)

        # Assert
        assert y_term == 0.0
        assert log_likelihood(truths, x_only) == pytest.approx(x_term)

    def test_invariant_under_site_permutation(self, truths, small_data):
        # Arrange
        order = np.random.default_rng(8).permutation(small_data.n)
        shuffled = small_data.subset(order)

        # Act
        original = log_likelihood(truths, small_data)
        permuted = log_likelihood(truths, shuffled)

        # Assert
        assert permuted == pytest.approx(original, rel=1e-9)


class TestSimulation:
    def test_deterministic_under_seed(self, truths):
        # Arrange
        locations = np.random.default_rng(0).uniform(0, 10, (30, 2))

        # Act
        a = simulate_bivariate_gp(locations, truths, seed=5)
        b = simulate_bivariate_gp(locations, truths, seed=5)

        # Assert
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.y, b.y)

    def test_moments_over_seeds(self, truths):
        # Arrange
        theta = truths.model_copy(update={"alpha0": 0.4, "beta0": -0.3})
        locations = np.array([[0.0, 0.0], [0.7, 0.2], [1.5, 1.1]])
        n_draws = 4000

        # Act
        draws = np.array(
            [
                np.concatenate([d.y, d.x])
                for d in (simulate_bivariate_gp(locations, theta, seed=seed) for seed in range(n_draws))
            ]
        )

        # Assert
        expected_mean = np.repeat([theta.beta0 + theta.beta1 * theta.alpha0, theta.alpha0], 3)
        expected_cov = level_covariance(locations, theta)
        var = np.diag(expected_cov)
        assert np.all(np.abs(draws.mean(axis=0) - expected_mean) < 5.0 * np.sqrt(var / n_draws))
        cov_se = np.sqrt((np.outer(var, var) + expected_cov**2) / n_draws)
        assert np.all(np.abs(np.cov(draws, rowvar=False) - expected_cov) < 5.0 * cov_se)

    def test_large_field_variance_near_sill(self, truths):
        # Arrange
        locations = uniform_locations(2000, (0.0, 10.0, 0.0, 10.0), np.random.default_rng(4))

        # Act
        data = simulate_bivariate_gp(locations, truths, seed=6)

        # Assert
        assert 0.5 <= np.var(data.x, ddof=1) <= 2.0


class TestPosteriorChain:
    def test_summary_columns(self, truth_chain):
        # Act
        summary = truth_chain.summary()

        # Assert
        assert list(summary.columns) == ["0.025", "mean", "0.975"]
        assert list(summary.index) == list(PARAM_NAMES)
        assert summary.loc["beta1", "mean"] == pytest.approx(0.5)

    def test_thinned_is_evenly_spaced(self):
        # Arrange
        chain = PosteriorChain(samples=[ThetaSample(beta0=float(i)) for i in range(100)])

        # Act
        thinned = chain.thinned(5)

        # Assert
        assert len(thinned) == 5
        assert thinned.column("beta0").tolist() == [0.0, 24.0, 49.0, 74.0, 99.0]
        assert chain.thinned(None) is chain

    def test_array_round_trip(self, truths):
        # Act
        back = ThetaSample.from_array(truths.as_array())

        # Assert
        assert back == truths


class TestFitMcmc:
    def test_chain_length_and_support(self, small_data, short_mcmc):
        # Act
        chain = fit_mcmc(small_data, cfg=short_mcmc)

        # Assert
        assert len(chain) == short_mcmc.n_retained
        assert np.all(chain.column("sigma2_x") > 0)
        assert np.all((chain.column("phi_y") > 0.5) & (chain.column("phi_y") < 10.0))
        assert set(chain.acceptance) == {"x", "y", "regression"}

    def test_deterministic_under_seed(self, small_data, short_mcmc):
        # Act
        a = fit_mcmc(small_data, cfg=short_mcmc)
        b = fit_mcmc(small_data, cfg=short_mcmc)

        # Assert
        np.testing.assert_array_equal(a.as_array(), b.as_array())

    def test_pinned_parameters_stay_fixed(self, small_data, short_mcmc):
        # Arrange
        priors = PriorSpec(fixed={"phi_x": 1.05, "phi_y": 1.05})

        # Act
        chain = fit_mcmc(small_data, priors=priors, cfg=short_mcmc)

        # Assert
        assert np.all(chain.column("phi_x") == 1.05)
        assert np.all(chain.column("phi_y") == 1.05)

    def test_covariate_only_fit(self, small_data, short_mcmc):
        # Arrange
        x_only = Dataset(locations=small_data.locations, x=small_data.x)

        # Act
        chain = fit_mcmc(x_only, cfg=short_mcmc)

        # Assert
        assert chain.x_only
        assert set(chain.acceptance) == {"x"}
        assert np.unique(chain.column("beta1")).size == 1

    def test_prior_sampling_without_likelihood(self, small_data):
        # Arrange
        cfg = McmcConfig(iterations=12000, burn_in=2000, thin=1, seed=9)
        priors = PriorSpec(
            alpha0=NormalPrior(mean=1.0, var=0.25),
            beta0=NormalPrior(mean=-0.5, var=1.0),
            beta1=NormalPrior(mean=2.0, var=1.0),
        )

        # Act
        chain = fit_mcmc(small_data, priors=priors, cfg=cfg, use_likelihood=False)

        # Assert
        for name in ("alpha0", "beta0", "beta1"):
            prior = getattr(priors, name)
            draws = chain.column(name)
            squares = (draws - prior.mean) ** 2
            assert abs(draws.mean() - prior.mean) <= 4.0 * batch_means_se(draws), name
            assert abs(squares.mean() - prior.var) <= 4.0 * batch_means_se(squares), name

    def test_non_finite_start_raises(self, small_data, short_mcmc):
        # Arrange
        huge = Dataset(locations=small_data.locations, x=small_data.x * 1e200, y=small_data.y)

        # Act & Assert
        with pytest.raises(InitializationError, match="rescaling"):
            fit_mcmc(huge, cfg=short_mcmc)


class TestMetropolisBlock:
    def test_better_proposal_is_accepted(self):
        # Arrange
        block = MetropolisBlock("regression", [0.1, 0.1], window=50, target=0.3)
        z = np.array([0.5, -0.5])

        # Act
        state, target, accepted = block.step(z, 0.0, lambda _: math.inf, np.random.default_rng(1), adapting=False)

        # Assert
        assert accepted is True
        assert target == math.inf
        assert not np.array_equal(state, z)
        assert (block.accepted, block.proposed) == (1, 1)

    def test_impossible_proposal_is_rejected(self):
        # Arrange
        block = MetropolisBlock("regression", [0.1, 0.1], window=50, target=0.3)
        z = np.array([0.5, -0.5])

        # Act
        state, target, accepted = block.step(z, -1.0, lambda _: -math.inf, np.random.default_rng(1), adapting=False)

        # Assert
        assert accepted is False
        assert target == -1.0
        np.testing.assert_array_equal(state, z)
        assert (block.accepted, block.proposed) == (0, 1)

    def test_rejection_reported_when_proposal_equals_state(self):
        # Arrange
        block = MetropolisBlock("x", [0.0], window=50, target=0.3)
        z = np.array([0.2])

        # Act
        state, _, accepted = block.step(z, 0.0, lambda _: -math.inf, np.random.default_rng(2), adapting=False)

        # Assert
        np.testing.assert_array_equal(state, z)
        assert accepted is False
