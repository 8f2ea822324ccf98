import logging
import math
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import rich
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from rich.panel import Panel
from rich.progress import Progress
from scipy.linalg import solve_triangular
from scipy.spatial.distance import cdist
from scipy.special import expit, gammaln

from gradfield.errors import DomainError, FactorizationError, InitializationError
from gradfield.kernel import _level_cov, matern32_correlation
from gradfield.utils import (
    as_points,
    check_distinct,
    cholesky_with_ridge,
    make_rng,
    setup_pbar,
)

logger = logging.getLogger(__name__)

PARAM_NAMES = ("alpha0", "beta0", "beta1", "sigma2_x", "sigma2_y", "phi_x", "phi_y")
BLOCKS = {
    "x": ("alpha0", "sigma2_x", "phi_x"),
    "y": ("sigma2_y", "phi_y"),
    "regression": ("beta0", "beta1"),
}


class ThetaSample(BaseModel):
    """
    One draw of the bivariate GP model parameters.

    X(s) = alpha0 + w_x(s) and Y(s) | X(s) = beta0 + beta1 X(s) + w_y(s), with
    w_x, w_y independent Matérn 3/2 processes.

    Attributes:
        alpha0 (float): Mean of X.
        beta0 (float): Intercept of Y given X.
        beta1 (float): Regression slope of Y on X.
        sigma2_x (float): Variance of w_x.
        sigma2_y (float): Variance of w_y.
        phi_x (float): Decay of w_x.
        phi_y (float): Decay of w_y.
    """

    model_config = ConfigDict(frozen=True)

    alpha0: float = 0.0
    beta0: float = 0.0
    beta1: float = 0.0
    sigma2_x: float = Field(1.0, gt=0)
    sigma2_y: float = Field(1.0, gt=0)
    phi_x: float = Field(1.0, gt=0)
    phi_y: float = Field(1.0, gt=0)

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in PARAM_NAMES])

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "ThetaSample":
        return cls(**dict(zip(PARAM_NAMES, (float(v) for v in values))))


class Dataset(BaseModel):
    """
    Co-located observations of a covariate X and a response Y.

    Attributes:
        locations (np.ndarray): Locations of shape (n, 2).
        x (np.ndarray): Covariate values.
        y (Optional[np.ndarray]): Response values; absent for covariate-only fits.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    locations: np.ndarray
    x: np.ndarray
    y: Optional[np.ndarray] = None

    @field_validator("locations", mode="before")
    @classmethod
    def _cast_locations(cls, value):
        return as_points(value)

    @field_validator("x", "y", mode="before")
    @classmethod
    def _cast_values(cls, value):
        if value is None:
            return value

        arr = np.asarray(value, dtype=float).ravel()
        if not np.all(np.isfinite(arr)):
            raise ValueError("Observed values must be finite.")

        return arr

    @model_validator(mode="after")
    def _check_shapes(self):
        n = len(self.locations)

        if len(self.x) != n or (self.y is not None and len(self.y) != n):
            raise ValueError("locations, x and y must have equal lengths.")
        if n < 3:
            raise ValueError(f"A dataset needs at least 3 locations, got {n}.")

        check_distinct(self.locations)
        return self

    @property
    def n(self) -> int:
        return len(self.locations)

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(
            locations=self.locations[index],
            x=self.x[index],
            y=None if self.y is None else self.y[index],
        )


class NormalPrior(BaseModel):
    mean: float = 0.0
    var: float = Field(100.0, ge=0)

    def log_pdf(self, value: float) -> float:
        return -0.5 * (value - self.mean) ** 2 / self.var - 0.5 * math.log(2 * math.pi * self.var)


class InverseGammaPrior(BaseModel):
    shape: float = Field(2.0, gt=0)
    scale: float = Field(0.1, gt=0)

    def log_pdf(self, value: float) -> float:
        if not value > 0:
            return -math.inf
        a, b = self.shape, self.scale
        return a * math.log(b) - float(gammaln(a)) - (a + 1) * math.log(value) - b / value

    @property
    def center(self) -> float:
        """Prior mean when it exists, else the mode."""
        if self.shape > 1:
            return self.scale / (self.shape - 1)
        return self.scale / (self.shape + 1)


class UniformPrior(BaseModel):
    lower: float = Field(0.5, gt=0)
    upper: float = 10.0

    @model_validator(mode="after")
    def _check_bounds(self):
        if self.upper < self.lower:
            raise ValueError(f"Uniform prior needs lower <= upper, got {self.lower}, {self.upper}.")
        return self

    def log_pdf(self, value: float) -> float:
        if self.lower < value < self.upper:
            return -math.log(self.upper - self.lower)
        return -math.inf


class PriorSpec(BaseModel):
    """
    Priors of the bivariate GP model.

    Defaults are N(0, 100) for alpha0, beta0 and beta1, IG(2, 0.1) for the
    variances and U(0.5, 10) for the decays. A normal with zero variance or a
    uniform with equal bounds pins the parameter; `fixed` pins any parameter
    to a given value.
    """

    alpha0: NormalPrior = NormalPrior()
    beta0: NormalPrior = NormalPrior()
    beta1: NormalPrior = NormalPrior()
    sigma2_x: InverseGammaPrior = InverseGammaPrior()
    sigma2_y: InverseGammaPrior = InverseGammaPrior()
    phi_x: UniformPrior = UniformPrior()
    phi_y: UniformPrior = UniformPrior()
    fixed: Dict[str, float] = {}

    @field_validator("fixed")
    @classmethod
    def _check_fixed(cls, value):
        unknown = set(value) - set(PARAM_NAMES)
        if unknown:
            raise ValueError(f"Unknown parameters in fixed: {sorted(unknown)}")
        return value

    def pinned(self) -> Dict[str, float]:
        """Parameters with a point-mass prior and their values."""

        pinned = {}
        for name in ("alpha0", "beta0", "beta1"):
            prior = getattr(self, name)
            if prior.var == 0.0:
                pinned[name] = prior.mean
        for name in ("phi_x", "phi_y"):
            prior = getattr(self, name)
            if prior.upper == prior.lower:
                pinned[name] = prior.lower

        pinned.update(self.fixed)
        return pinned


class McmcConfig(BaseModel):
    """
    Settings of a Metropolis run.

    Attributes:
        iterations (int): Total iterations including burn-in.
        burn_in (int): Iterations discarded; proposal scales adapt only here.
        thin (int): Keep every `thin`-th post burn-in iterate.
        seed (int): Seed of the chain's generator.
        proposal_scales (Dict[str, float]): Initial proposal scale per parameter
            on the transformed scale.
        adaptation_window (int): Iterations between scale adaptations.
        target_acceptance (float): Acceptance rate the adaptation aims for.
    """

    iterations: int = Field(10500, gt=0)
    burn_in: int = Field(500, ge=0)
    thin: int = Field(5, ge=1)
    seed: int = Field(0, ge=0, lt=2**64)
    proposal_scales: Dict[str, float] = {}
    adaptation_window: int = Field(25, ge=1)
    target_acceptance: float = Field(0.44, gt=0, lt=1)

    @model_validator(mode="after")
    def _check_burn_in(self):
        if self.burn_in >= self.iterations:
            raise ValueError("burn_in must be smaller than iterations.")
        return self

    @property
    def n_retained(self) -> int:
        return (self.iterations - self.burn_in) // self.thin

    def is_retained(self, iteration: int) -> bool:
        after = iteration - self.burn_in + 1
        return after > 0 and after % self.thin == 0


class PosteriorChain(BaseModel):
    """
    Retained posterior draws of the GP model.

    Attributes:
        samples (List[ThetaSample]): Draws in iteration order.
        acceptance (Dict[str, float]): Post burn-in acceptance rate per block.
        config (McmcConfig): Settings of the run.
        seed (int): Seed of the run.
        x_only (bool): Whether only the covariate process was fitted.
    """

    samples: List[ThetaSample]
    acceptance: Dict[str, float] = {}
    config: McmcConfig = McmcConfig()
    seed: int = 0
    x_only: bool = False

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index) -> ThetaSample:
        return self.samples[index]

    def __iter__(self):
        return iter(self.samples)

    def as_array(self) -> np.ndarray:
        return np.array([s.as_array() for s in self.samples]).reshape(-1, len(PARAM_NAMES))

    def column(self, name: str) -> np.ndarray:
        return self.as_array()[:, PARAM_NAMES.index(name)]

    def split(self) -> Tuple["PosteriorChain", "PosteriorChain"]:
        half = len(self) // 2
        first = self.model_copy(update={"samples": self.samples[:half]})
        second = self.model_copy(update={"samples": self.samples[half:]})
        return first, second

    def thinned(self, max_draws: Optional[int]) -> "PosteriorChain":
        """Evenly spaced subset of at most `max_draws` samples."""

        if max_draws is None or len(self) <= max_draws:
            return self
        index = np.unique(np.linspace(0, len(self) - 1, max_draws).astype(int))
        return self.model_copy(update={"samples": [self.samples[i] for i in index]})

    def summary(self) -> pd.DataFrame:
        """Posterior 2.5% quantile, mean and 97.5% quantile per parameter."""

        values = self.as_array()
        return pd.DataFrame(
            {
                "0.025": np.quantile(values, 0.025, axis=0),
                "mean": values.mean(axis=0),
                "0.975": np.quantile(values, 0.975, axis=0),
            },
            index=list(PARAM_NAMES),
        )

    def credible_interval(self, name: str, level: float = 0.95) -> Tuple[float, float]:
        tail = (1.0 - level) / 2.0
        lo, hi = np.quantile(self.column(name), [tail, 1.0 - tail])
        return float(lo), float(hi)


def _gaussian_logpdf(resid: np.ndarray, sigma2: float, phi: float, dist: np.ndarray) -> float:
    cov = sigma2 * matern32_correlation(dist, phi)
    factor = cholesky_with_ridge(cov, exact_first=True)
    alpha = solve_triangular(factor, resid, lower=True)

    return float(
        -0.5 * len(resid) * math.log(2.0 * math.pi)
        - np.sum(np.log(np.diag(factor)))
        - 0.5 * alpha @ alpha
    )


def _x_term(theta: ThetaSample, data: Dataset, dist: np.ndarray) -> float:
    return _gaussian_logpdf(data.x - theta.alpha0, theta.sigma2_x, theta.phi_x, dist)


def _y_term(theta: ThetaSample, data: Dataset, dist: np.ndarray) -> float:
    if data.y is None:
        return 0.0
    resid = data.y - theta.beta0 - theta.beta1 * data.x
    return _gaussian_logpdf(resid, theta.sigma2_y, theta.phi_y, dist)


def log_likelihood_terms(theta: ThetaSample, data: Dataset) -> Tuple[float, float]:
    """The X term and the Y | X term of the conditional likelihood."""

    dist = cdist(data.locations, data.locations)
    return _x_term(theta, data, dist), _y_term(theta, data, dist)


def log_likelihood(theta: ThetaSample, data: Dataset) -> float:
    """
    Conditional log-likelihood log N(x; alpha0, Sx) + log N(y; beta0 + beta1 x, Sy).

    Args:
        theta (ThetaSample): Model parameters.
        data (Dataset): Observations; a covariate-only dataset yields the X term.

    Returns:
        float: The log-likelihood.

    Raises:
        FactorizationError: If a covariance cannot be factorized.
    """

    return sum(log_likelihood_terms(theta, data))


class _Transform:
    """Maps a constrained parameter to the real line and back."""

    def __init__(self, kind: str, lower: float = 0.0, upper: float = 1.0):
        self.kind = kind
        self.lower = lower
        self.upper = upper

    def forward(self, value: float) -> float:
        if self.kind == "log":
            return math.log(value)
        if self.kind == "logit":
            return math.log((value - self.lower) / (self.upper - value))
        return value

    def backward(self, z: float) -> float:
        if self.kind == "log":
            return math.exp(z)
        if self.kind == "logit":
            return self.lower + (self.upper - self.lower) * float(expit(z))
        return z

    def log_jacobian(self, value: float) -> float:
        if self.kind == "log":
            return math.log(value)
        if self.kind == "logit":
            width = self.upper - self.lower
            return math.log((value - self.lower) * (self.upper - value) / width)
        return 0.0


def _transforms(priors: PriorSpec) -> Dict[str, _Transform]:
    return {
        "alpha0": _Transform("identity"),
        "beta0": _Transform("identity"),
        "beta1": _Transform("identity"),
        "sigma2_x": _Transform("log"),
        "sigma2_y": _Transform("log"),
        "phi_x": _Transform("logit", priors.phi_x.lower, priors.phi_x.upper),
        "phi_y": _Transform("logit", priors.phi_y.lower, priors.phi_y.upper),
    }


class MetropolisBlock:
    """
    Adaptive random-walk Metropolis update of a group of transformed parameters.

    During burn-in the global scale follows a Robbins-Monro recursion towards
    the target acceptance rate, and halfway through burn-in the proposal shape
    is replaced by the empirical covariance of the block's burn-in path. Both
    are frozen once burn-in ends.
    """

    def __init__(
        self,
        name: str,
        scales: Sequence[float],
        window: int,
        target: float,
    ):
        self.name = name
        self.size = len(scales)
        self.shape = np.diag(np.asarray(scales, dtype=float))
        self.log_scale = 0.0
        self.window = window
        self.target = target
        self.history: List[np.ndarray] = []
        self._window_accepts = 0
        self._adaptations = 0
        self.accepted = 0
        self.proposed = 0

    def propose(self, z: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        step = self.shape @ rng.standard_normal(self.size)
        return z + math.exp(self.log_scale) * step

    def step(
        self,
        z: np.ndarray,
        log_target: float,
        evaluate: Callable[[np.ndarray], float],
        rng: np.random.Generator,
        adapting: bool,
    ) -> Tuple[np.ndarray, float, bool]:
        """One Metropolis transition; returns the new state, its log target and the acceptance flag."""

        proposal = self.propose(z, rng)
        proposal_target = evaluate(proposal)
        accept = math.log(rng.uniform()) < proposal_target - log_target

        if adapting:
            self._adapt(accept, proposal if accept else z)
        else:
            self.proposed += 1
            self.accepted += int(accept)

        if accept:
            return proposal, proposal_target, True
        return z, log_target, False

    def _adapt(self, accepted: bool, state: np.ndarray):
        self._window_accepts += int(accepted)
        self.history.append(np.array(state))

        if len(self.history) % self.window != 0:
            return

        self._adaptations += 1
        rate = self._window_accepts / self.window
        self.log_scale += (rate - self.target) / math.sqrt(self._adaptations)
        self._window_accepts = 0

    def reshape_from_history(self):
        """Replaces the proposal shape by the Cholesky factor of the burn-in covariance."""

        if len(self.history) < 10 * self.size:
            return

        path = np.array(self.history)
        cov = np.atleast_2d(np.cov(path, rowvar=False))
        cov = cov * 2.38**2 / self.size + 1e-10 * np.eye(self.size)

        try:
            self.shape = np.linalg.cholesky(cov)
            self.log_scale = 0.0
        except np.linalg.LinAlgError:
            logger.debug("Keeping diagonal proposal for block %s", self.name)

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.proposed if self.proposed else float("nan")


def _initial_theta(data: Dataset, priors: PriorSpec) -> Dict[str, float]:
    x = data.x
    init = {"alpha0": float(np.mean(x)), "sigma2_x": max(float(np.var(x)), 1e-6)}

    if data.y is not None and np.var(x) > 0:
        design = np.column_stack([np.ones_like(x), x])
        (b0, b1), *_ = np.linalg.lstsq(design, data.y, rcond=None)
        resid = data.y - b0 - b1 * x
        init.update(beta0=float(b0), beta1=float(b1), sigma2_y=max(float(np.var(resid)), 1e-6))
    else:
        ig = priors.sigma2_y
        mode = ig.scale / (ig.shape + 1.0)
        init.update(beta0=priors.beta0.mean, beta1=priors.beta1.mean, sigma2_y=mode)

    for name in ("phi_x", "phi_y"):
        prior = getattr(priors, name)
        init[name] = math.sqrt(prior.lower * prior.upper)

    init.update(priors.pinned())
    return init


def _default_scales(data: Dataset, init: Dict[str, float]) -> Dict[str, float]:
    sd_x = float(np.std(data.x)) or 1.0
    sd_y = math.sqrt(init["sigma2_y"])
    n = data.n

    return {
        "alpha0": 3.0 * sd_x / math.sqrt(n),
        "beta0": 3.0 * sd_y / math.sqrt(n),
        "beta1": 3.0 * sd_y / (sd_x * math.sqrt(n)),
        "sigma2_x": 0.2,
        "sigma2_y": 0.2,
        "phi_x": 0.3,
        "phi_y": 0.3,
    }


def fit_mcmc(
    data: Dataset,
    priors: Optional[PriorSpec] = None,
    cfg: Optional[McmcConfig] = None,
    use_likelihood: bool = True,
    verbose: bool = False,
) -> PosteriorChain:
    """
    Samples the posterior of the bivariate GP model by blocked adaptive Metropolis.

    Parameters are updated on transformed scales (log variances, logit decays
    on their prior bounds) in three blocks: the X parameters, the Y parameters
    and the regression terms. A dataset without `y` fits the X block only.

    Args:
        data (Dataset): Observations.
        priors (Optional[PriorSpec]): Priors. Defaults to PriorSpec().
        cfg (Optional[McmcConfig]): Run settings. Defaults to McmcConfig().
        use_likelihood (bool): Drop the likelihood to sample the prior.
        verbose (bool): Show a progress bar.

    Returns:
        PosteriorChain: The retained draws with acceptance rates.

    Raises:
        InitializationError: If the posterior is not finite at the start.
    """

    priors = priors or PriorSpec()
    cfg = cfg or McmcConfig()
    rng = make_rng(cfg.seed)
    dist = cdist(data.locations, data.locations)
    x_only = data.y is None

    transforms = _transforms(priors)
    pinned = priors.pinned()
    try:
        init = _initial_theta(data, priors)
    except (ValueError, OverflowError) as e:
        raise InitializationError(
            f"Could not compute initial values: {e}. Consider rescaling the coordinates or the data."
        ) from e
    scales = {**_default_scales(data, init), **cfg.proposal_scales}

    blocks = {}
    for block_name, names in BLOCKS.items():
        if x_only and block_name != "x":
            continue
        free = tuple(name for name in names if name not in pinned)
        if free:
            blocks[block_name] = free

    current = dict(init)

    def term(block_name: str, theta: ThetaSample) -> float:
        if not use_likelihood:
            return 0.0
        try:
            if block_name == "x":
                return _x_term(theta, data, dist)
            return _y_term(theta, data, dist)
        except FactorizationError:
            return -math.inf

    def log_prior(values: Dict[str, float], names: Sequence[str]) -> float:
        total = 0.0
        for name in names:
            total += getattr(priors, name).log_pdf(values[name])
            total += transforms[name].log_jacobian(values[name])
        return total

    def to_theta(values: Dict[str, float]) -> ThetaSample:
        return ThetaSample(**values)

    try:
        theta = to_theta(current)
        terms = {"x": term("x", theta), "y": term("y", theta)}
        free_names = [n for names in blocks.values() for n in names]
        total = terms["x"] + terms["y"] + log_prior(current, free_names)
    except (ValueError, OverflowError) as e:
        raise InitializationError(
            f"Could not evaluate the posterior at the initial values {current}: {e}. "
            "Consider rescaling the coordinates or the data."
        ) from e

    if not math.isfinite(total):
        raise InitializationError(
            f"The posterior is not finite at the initial values {current}. "
            "Consider rescaling the coordinates or the data."
        )

    samplers = {
        block_name: MetropolisBlock(
            name=block_name,
            scales=[scales[n] for n in names],
            window=cfg.adaptation_window,
            target=cfg.target_acceptance,
        )
        for block_name, names in blocks.items()
    }

    if verbose:
        rich.print(
            Panel(
                "\n".join(
                    [
                        f"Locations: [bold]{data.n}[/bold]",
                        f"Blocks: {', '.join(blocks) or 'none'}",
                        f"Iterations: {cfg.iterations} (burn-in {cfg.burn_in}, thin {cfg.thin})",
                    ]
                ),
                title="[bold]GP posterior sampling[/bold]",
                expand=False,
            )
        )

    samples: List[ThetaSample] = []
    progress = Progress(disable=not verbose)

    with progress:
        pbar = setup_pbar("Sampling", cfg.iterations, progress)

        for iteration in range(cfg.iterations):
            adapting = iteration < cfg.burn_in

            if iteration == cfg.burn_in // 2:
                for sampler in samplers.values():
                    sampler.reshape_from_history()

            for block_name, names in blocks.items():
                likelihood_key = "x" if block_name == "x" else "y"
                z = np.array([transforms[n].forward(current[n]) for n in names])
                block_target = terms[likelihood_key] + log_prior(current, names)

                def evaluate(proposal: np.ndarray) -> float:
                    values = dict(current)
                    try:
                        for n, zi in zip(names, proposal):
                            values[n] = transforms[n].backward(float(zi))
                        theta = to_theta(values)
                    except (ValueError, OverflowError):
                        return -math.inf
                    prior = log_prior(values, names)
                    if not math.isfinite(prior):
                        return -math.inf
                    return term(likelihood_key, theta) + prior

                z_new, target_new, accepted = samplers[block_name].step(
                    z, block_target, evaluate, rng, adapting
                )

                if accepted:
                    for n, zi in zip(names, z_new):
                        current[n] = transforms[n].backward(float(zi))
                    terms[likelihood_key] = target_new - log_prior(current, names)

            if cfg.is_retained(iteration):
                samples.append(to_theta(current))

            progress.update(pbar, advance=1)

    acceptance = {name: sampler.acceptance_rate for name, sampler in samplers.items()}
    logger.info("Finished %d iterations, acceptance %s", cfg.iterations, acceptance)

    return PosteriorChain(
        samples=samples,
        acceptance=acceptance,
        config=cfg,
        seed=cfg.seed,
        x_only=x_only,
    )


def uniform_locations(n: int, window: Sequence[float], rng: np.random.Generator) -> np.ndarray:
    """n locations drawn uniformly in the window (xmin, xmax, ymin, ymax)."""

    xmin, xmax, ymin, ymax = window
    return np.column_stack([rng.uniform(xmin, xmax, n), rng.uniform(ymin, ymax, n)])


def simulate_bivariate_gp(locations, theta: ThetaSample, seed: int) -> Dataset:
    """
    Exact draw of (X, Y) at the given locations.

    The level covariance [[K + b^2 G, b G], [b G, G]] is factorized through its
    two independent components G and K, so X = alpha0 + w_x and
    Y = beta0 + beta1 X + w_y.

    Args:
        locations: Locations of shape (n, 2).
        theta (ThetaSample): Model parameters.
        seed (int): Seed of the draw.

    Returns:
        Dataset: The realization.

    Raises:
        FactorizationError: If a covariance cannot be factorized.
        DomainError: If locations are invalid.
    """

    locations = as_points(locations)
    check_distinct(locations)

    if len(locations) < 3:
        raise DomainError("At least 3 locations are needed.")

    rng = make_rng(seed)
    dist = cdist(locations, locations)
    n = len(locations)

    g_factor = cholesky_with_ridge(theta.sigma2_x * matern32_correlation(dist, theta.phi_x))
    k_factor = cholesky_with_ridge(theta.sigma2_y * matern32_correlation(dist, theta.phi_y))

    x = theta.alpha0 + g_factor @ rng.standard_normal(n)
    y = theta.beta0 + theta.beta1 * x + k_factor @ rng.standard_normal(n)

    return Dataset(locations=locations, x=x, y=y)


def level_covariance(locations, theta: ThetaSample) -> np.ndarray:
    """Joint covariance of [Y, X] at the locations."""

    locations = as_points(locations)
    return _level_cov(locations, locations, theta)
