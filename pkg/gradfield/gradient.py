"""Posterior-predictive inference for surfaces and their gradients.

For one parameter draw, the target levels and gradients given the observed
levels are Gaussian with moments from the Schur complement of the joint
covariance assembled in `gradfield.kernel`. Composition sampling repeats this
for every retained posterior draw.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    PrivateAttr,
    ValidationInfo,
    field_validator,
    model_validator,
)
from rich.progress import Progress
from scipy.linalg import solve_triangular
from scipy.spatial import cKDTree

from gradfield.errors import CompositionError, DomainError, FactorizationError
from gradfield.kernel import UnitVector, joint_cov_blocks
from gradfield.model import Dataset, PosteriorChain, ThetaSample
from gradfield.utils import (
    DUPLICATE_TOLERANCE,
    as_points,
    check_distinct,
    cholesky_with_ridge,
    make_rng,
    setup_pbar,
    theta_stream,
)

logger = logging.getLogger(__name__)

COINCIDENT_OFFSET = 1e-6
MAX_FAILURE_RATE = 0.01


class PredictionTargets(BaseModel):
    """
    Locations at which levels and gradients are predicted.

    Attributes:
        locations (np.ndarray): Targets of shape (m, 2).
        want_level (np.ndarray): Per-target flag for (Y, X).
        want_gradient (np.ndarray): Per-target flag for (grad Y, grad X).
        offset_coincident (bool): Move targets that coincide with an observation
            by 1e-6 spatial units along the first axis instead of failing.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    locations: np.ndarray
    want_level: np.ndarray = Field(default=None, validate_default=True)
    want_gradient: np.ndarray = Field(default=None, validate_default=True)
    offset_coincident: bool = False

    @field_validator("locations", mode="before")
    @classmethod
    def _cast_locations(cls, value):
        arr = as_points(value, "targets")
        if len(arr) == 0:
            raise ValueError("At least one target is required.")
        check_distinct(arr)
        return arr

    @field_validator("want_level", "want_gradient", mode="before")
    @classmethod
    def _broadcast_flags(cls, value, info: ValidationInfo):
        locations = info.data.get("locations")
        m = 0 if locations is None else len(locations)
        value = True if value is None else value
        return np.broadcast_to(np.asarray(value, dtype=bool), (m,)).copy()

    @model_validator(mode="after")
    def _check_requested(self):
        if not (self.want_level.any() or self.want_gradient.any()):
            raise ValueError("No component requested at any target.")
        return self

    @classmethod
    def at(cls, locations, level: bool = True, gradient: bool = True, **kwargs) -> "PredictionTargets":
        return cls(locations=locations, want_level=level, want_gradient=gradient, **kwargs)

    def __len__(self) -> int:
        return len(self.locations)

    def columns(self) -> np.ndarray:
        """Positions of the requested components in the target part of the joint vector."""

        m = len(self)
        idx = np.arange(m)
        level = idx[self.want_level]
        grad = idx[self.want_gradient]

        parts = [
            level,
            m + level,
            2 * m + np.ravel(np.column_stack([2 * grad, 2 * grad + 1])),
            4 * m + np.ravel(np.column_stack([2 * grad, 2 * grad + 1])),
        ]
        return np.sort(np.concatenate(parts)).astype(int)

    def resolve(self, observed: Optional[np.ndarray]) -> np.ndarray:
        """Target locations, shifted off observed sites when `offset_coincident` is set."""

        if observed is None or len(observed) == 0 or not self.offset_coincident:
            return self.locations

        dist, _ = cKDTree(observed).query(self.locations, p=np.inf)
        hit = dist <= DUPLICATE_TOLERANCE
        if not hit.any():
            return self.locations

        logger.debug("Offsetting %d targets that coincide with observations", int(hit.sum()))
        shifted = self.locations.copy()
        shifted[hit, 0] += COINCIDENT_OFFSET
        return shifted


class GradientDraw(BaseModel):
    """
    One joint draw of levels and gradients at the targets.

    Components that were not requested are NaN.

    Attributes:
        locations (np.ndarray): Target locations of shape (m, 2).
        y (np.ndarray): Response levels of shape (m,).
        x (np.ndarray): Covariate levels of shape (m,).
        grad_y (np.ndarray): Response gradients of shape (m, 2).
        grad_x (np.ndarray): Covariate gradients of shape (m, 2).
        theta_index (int): Index of the posterior draw that produced it.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    locations: np.ndarray
    y: np.ndarray
    x: np.ndarray
    grad_y: np.ndarray
    grad_x: np.ndarray
    theta_index: int = Field(0, ge=0)

    def directional(self, u: UnitVector):
        """(D_u Y, D_u X) at every target."""

        uu = u.as_array()
        return self.grad_y @ uu, self.grad_x @ uu


class ConditionalGaussian(BaseModel):
    """
    Gaussian law of the requested target components given the observations.

    Attributes:
        mean (np.ndarray): Mean vector.
        cov (np.ndarray): Covariance matrix.
        locations (np.ndarray): Resolved target locations.
        columns (np.ndarray): Positions of the components in the full target
            vector (Y(t), X(t), grad Y(t), grad X(t)).
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    mean: np.ndarray
    cov: np.ndarray
    locations: np.ndarray
    columns: np.ndarray

    _factor: Optional[np.ndarray] = PrivateAttr(default=None)

    @property
    def factor(self) -> np.ndarray:
        """Lower Cholesky factor of `cov`, ridged if needed; zero for a degenerate law."""

        if self._factor is None:
            if not np.any(self.cov):
                self._factor = np.zeros_like(self.cov)
            else:
                self._factor = cholesky_with_ridge(self.cov)
        return self._factor

    def sample(self, rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray:
        """Draws of shape (len(mean),) or (size, len(mean))."""

        k = len(self.mean)
        if size is None:
            return self.mean + self.factor @ rng.standard_normal(k)
        return self.mean + rng.standard_normal((size, k)) @ self.factor.T

    def unpack(self, vector: np.ndarray, theta_index: int = 0) -> GradientDraw:
        m = len(self.locations)
        full = np.full(6 * m, np.nan)
        full[self.columns] = vector

        return GradientDraw(
            locations=self.locations,
            y=full[:m],
            x=full[m : 2 * m],
            grad_y=full[2 * m : 4 * m].reshape(m, 2),
            grad_x=full[4 * m :].reshape(m, 2),
            theta_index=theta_index,
        )

    def select(self, labels: Sequence[str]) -> np.ndarray:
        """Indices into `mean` of the named component kinds (y, x, grad_y, grad_x)."""

        m = len(self.locations)
        kinds = np.empty(6 * m, dtype=object)
        kinds[:m], kinds[m : 2 * m] = "y", "x"
        kinds[2 * m : 4 * m], kinds[4 * m :] = "grad_y", "grad_x"
        return np.flatnonzero(np.isin(kinds[self.columns], list(labels)))


def _prior_means(theta: ThetaSample, m: int) -> np.ndarray:
    mu_y = theta.beta0 + theta.beta1 * theta.alpha0
    return np.concatenate([np.full(m, mu_y), np.full(m, theta.alpha0), np.zeros(4 * m)])


def conditional_gradient_distribution(
    theta: ThetaSample,
    data: Optional[Dataset],
    targets: PredictionTargets,
) -> ConditionalGaussian:
    """
    Conditional law of target levels and gradients given the observed levels.

    Args:
        theta (ThetaSample): Model parameters.
        data (Optional[Dataset]): Observations. None gives the unconditional law.
            A dataset without `y` conditions on the covariate alone.
        targets (PredictionTargets): Targets and requested components.

    Returns:
        ConditionalGaussian: Mean and covariance of the requested components.

    Raises:
        DuplicateLocationError: If a target coincides with an observation.
        FactorizationError: If the observed covariance cannot be factorized.
    """

    observed = np.zeros((0, 2)) if data is None else data.locations
    locations = targets.resolve(observed)
    cols = targets.columns()
    m = len(locations)

    s_oo, s_ot, s_tt = joint_cov_blocks(observed, locations, theta)
    mean = _prior_means(theta, m)[cols]
    cov = s_tt[np.ix_(cols, cols)]

    if data is not None:
        n = data.n
        mu_y = theta.beta0 + theta.beta1 * theta.alpha0

        if data.y is None:
            obs = np.arange(n, 2 * n)
            resid = data.x - theta.alpha0
        else:
            obs = np.arange(2 * n)
            resid = np.concatenate([data.y - mu_y, data.x - theta.alpha0])

        factor = cholesky_with_ridge(s_oo[np.ix_(obs, obs)])
        weights = solve_triangular(factor, s_ot[np.ix_(obs, cols)], lower=True)
        whitened = solve_triangular(factor, resid, lower=True)

        mean = mean + weights.T @ whitened
        cov = cov - weights.T @ weights

    cov = 0.5 * (cov + cov.T)
    return ConditionalGaussian(mean=mean, cov=cov, locations=locations, columns=cols)


def draw_joint_gradients(
    dist: ConditionalGaussian,
    seed: Union[int, np.random.Generator],
    theta_index: int = 0,
) -> GradientDraw:
    """
    One exact draw from a conditional law.

    Args:
        dist (ConditionalGaussian): The law to sample.
        seed (Union[int, np.random.Generator]): Seed or generator.
        theta_index (int): Index recorded on the draw.

    Returns:
        GradientDraw: The draw; equal to the mean for a zero covariance.
    """

    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    return dist.unpack(dist.sample(rng), theta_index)


def kriging_mean(theta: ThetaSample, data: Dataset, points) -> np.ndarray:
    """Conditional means of (Y, X) at the points, shape (m, 2)."""

    targets = PredictionTargets.at(points, level=True, gradient=False)
    dist = conditional_gradient_distribution(theta, data, targets)
    m = len(targets)
    return np.column_stack([dist.mean[:m], dist.mean[m:]])


def krige_covariate(
    chain: PosteriorChain,
    data: Dataset,
    points,
    max_draws: Optional[int] = 200,
) -> np.ndarray:
    """
    Posterior predictive mean of the covariate at the points.

    The kriging mean of X is averaged over (an evenly thinned subset of) the
    chain. Only the covariate observations are used.

    Args:
        chain (PosteriorChain): A covariate-only or joint fit.
        data (Dataset): Observations; `y` is ignored.
        points: Prediction locations of shape (m, 2).
        max_draws (Optional[int]): Upper bound on the draws averaged.

    Returns:
        np.ndarray: Predicted covariate of shape (m,).
    """

    if len(chain) == 0:
        raise DomainError("Cannot krige from an empty chain.")

    x_data = Dataset(locations=data.locations, x=data.x)
    targets = PredictionTargets.at(points, level=True, gradient=False, offset_coincident=True)
    m = len(targets)

    draws = chain.thinned(max_draws)
    total = np.zeros(m)
    for theta in draws:
        dist = conditional_gradient_distribution(theta, x_data, targets)
        total += dist.mean[m:]

    return total / len(draws)


class CompositionResult(BaseModel):
    """
    Composition draws merged by theta index.

    Attributes:
        draws (List[GradientDraw]): One draw per successful posterior draw.
        failed (List[int]): Theta indices whose conditional could not be factorized.
        n_requested (int): Number of posterior draws processed.
    """

    draws: List[GradientDraw]
    failed: List[int] = []
    n_requested: int = 0

    def __len__(self) -> int:
        return len(self.draws)

    def __getitem__(self, index) -> GradientDraw:
        return self.draws[index]

    def __iter__(self):
        return iter(self.draws)

    @property
    def n_failed(self) -> int:
        return len(self.failed)

    def stack(self, component: str) -> np.ndarray:
        """Stacked component across draws, e.g. shape (L, m, 2) for `grad_y`."""
        return np.stack([getattr(d, component) for d in self.draws])

    def directional(self, u: UnitVector):
        """(D_u Y, D_u X) of shape (L, m) each."""

        uu = u.as_array()
        return self.stack("grad_y") @ uu, self.stack("grad_x") @ uu


def run_composition(
    n: int,
    conditional_for: Callable[[int], ConditionalGaussian],
    seed: int,
    n_workers: int = 1,
    mean_only: bool = False,
    verbose: bool = False,
) -> CompositionResult:
    """
    Draws once from each of `n` conditional laws.

    Draw `l` uses its own stream derived from (seed, l), so the result does not
    depend on `n_workers`.

    Args:
        n (int): Number of posterior draws.
        conditional_for (Callable[[int], ConditionalGaussian]): Builds the law of draw `l`.
        seed (int): Master seed.
        n_workers (int): Number of worker threads.
        mean_only (bool): Return conditional means instead of random draws.
        verbose (bool): Show a progress bar.

    Returns:
        CompositionResult: Draws ordered by theta index.

    Raises:
        CompositionError: If more than 1% of the laws cannot be factorized.
    """

    progress = Progress(disable=not verbose)

    def work(index: int) -> Optional[GradientDraw]:
        try:
            dist = conditional_for(index)
            if mean_only:
                draw = dist.unpack(dist.mean, index)
            else:
                draw = draw_joint_gradients(dist, theta_stream(seed, index), index)
        except FactorizationError as e:
            logger.debug("Composition draw %d failed: %s", index, e)
            draw = None

        progress.update(pbar, advance=1)
        return draw

    with progress:
        pbar = setup_pbar("Composition sampling", n, progress)

        if n_workers > 1:
            with ThreadPoolExecutor(max_workers=n_workers) as executor:
                results = list(executor.map(work, range(n)))
        else:
            results = [work(index) for index in range(n)]

    failed = [i for i, draw in enumerate(results) if draw is None]

    if failed:
        logger.warning("%d of %d composition draws failed to factorize", len(failed), n)
    if n and len(failed) / n > MAX_FAILURE_RATE:
        raise CompositionError(
            f"{len(failed)} of {n} composition draws failed to factorize "
            f"(more than {MAX_FAILURE_RATE:.0%})."
        )

    return CompositionResult(
        draws=[draw for draw in results if draw is not None],
        failed=failed,
        n_requested=n,
    )


def composition_sample(
    chain: PosteriorChain,
    data: Optional[Dataset],
    targets: PredictionTargets,
    seed: int,
    n_workers: int = 1,
    mean_only: bool = False,
    verbose: bool = False,
) -> CompositionResult:
    """
    Posterior-predictive draws of target levels and gradients by composition.

    Args:
        chain (PosteriorChain): Posterior draws.
        data (Optional[Dataset]): Observations; None samples the prior predictive.
        targets (PredictionTargets): Targets and requested components.
        seed (int): Master seed.
        n_workers (int): Number of worker threads.
        mean_only (bool): Return conditional means instead of random draws.
        verbose (bool): Show a progress bar.

    Returns:
        CompositionResult: One joint draw per posterior draw.
    """

    if len(chain) == 0:
        raise DomainError("Composition sampling needs a nonempty chain.")

    return run_composition(
        len(chain),
        lambda index: conditional_gradient_distribution(chain[index], data, targets),
        seed=seed,
        n_workers=n_workers,
        mean_only=mean_only,
        verbose=verbose,
    )
