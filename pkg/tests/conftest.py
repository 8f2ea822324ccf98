import numpy as np
import pytest

from gradfield.grid import GridSpec
from gradfield.model import McmcConfig, PosteriorChain, ThetaSample, simulate_bivariate_gp, uniform_locations
from gradfield.utils import make_rng


@pytest.fixture
def truths():
    """Parameters of the simulation study: phi = 1.05, unit variances, beta1 = 0.5."""
    return ThetaSample(
        alpha0=0.0,
        beta0=0.0,
        beta1=0.5,
        sigma2_x=1.0,
        sigma2_y=1.0,
        phi_x=1.05,
        phi_y=1.05,
    )


@pytest.fixture
def small_data(truths):
    """A 40-site realization on [0, 5] x [0, 5]."""
    locations = uniform_locations(40, (0.0, 5.0, 0.0, 5.0), make_rng(11))
    return simulate_bivariate_gp(locations, truths, seed=12)


@pytest.fixture
def short_mcmc():
    return McmcConfig(iterations=300, burn_in=100, thin=2, seed=3)


@pytest.fixture
def truth_chain(truths):
    """A chain that sits at the true parameters."""
    return PosteriorChain(samples=[truths] * 6)


@pytest.fixture
def target_grid():
    return GridSpec(window=(1.5, 3.5, 1.5, 3.5), nx=4, ny=3)


def create_pattern_events(n: int, window, seed: int = 0) -> np.ndarray:
    """Uniform events in a window."""

    xmin, xmax, ymin, ymax = window
    rng = make_rng(seed)
    return np.column_stack([rng.uniform(xmin, xmax, n), rng.uniform(ymin, ymax, n)])
