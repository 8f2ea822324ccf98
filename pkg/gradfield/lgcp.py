"""Log-Gaussian Cox process intensities over a covariate surface.

The intensity is lambda(s) = exp(beta0 + beta1 X(s) + w(s)) with w a Matérn 3/2
process whose decay is fixed beforehand by minimum contrast. The likelihood is
approximated on a grid of cells whose centroids represent them.
"""

import logging
import math
import warnings
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import rich
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from rich.panel import Panel
from rich.progress import Progress
from scipy import integrate, optimize
from scipy.spatial.distance import cdist

from gradfield.errors import DomainError, InitializationError, NonIdentifiableError
from gradfield.gradient import (
    CompositionResult,
    PredictionTargets,
    conditional_gradient_distribution,
    krige_covariate,
    run_composition,
)
from gradfield.grid import GridSpec, SurfaceGrid
from gradfield.kernel import UnitVector, matern32_correlation
from gradfield.model import (
    Dataset,
    InverseGammaPrior,
    McmcConfig,
    MetropolisBlock,
    NormalPrior,
    PosteriorChain,
    ThetaSample,
    uniform_locations,
)
from gradfield.processes import chain_rule_transform, disc_draws, lds_ratio, summarize_surface
from gradfield.utils import as_points, cholesky_with_ridge, make_rng, setup_pbar, split_window

logger = logging.getLogger(__name__)

LGCP_PARAM_NAMES = ("beta0", "beta1", "sigma2_z")
MIN_CONTRAST_EVENTS = 30
# Ripley's 1% CSR critical value of sup |L(r) - r|, in units of sqrt(area) / n
CSR_L_CRITICAL = 1.68


class PointPattern(BaseModel):
    """
    Events observed in a rectangular window.

    Attributes:
        events (np.ndarray): Event locations of shape (n, 2).
        window (Tuple[float, float, float, float]): (xmin, xmax, ymin, ymax).
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    events: np.ndarray
    window: Tuple[float, float, float, float]

    @field_validator("events", mode="before")
    @classmethod
    def _cast_events(cls, value):
        return as_points(value, "events")

    @field_validator("window", mode="before")
    @classmethod
    def _check_window(cls, value):
        return tuple(split_window(value))

    @model_validator(mode="after")
    def _check_inside(self):
        xmin, xmax, ymin, ymax = self.window
        e = self.events
        inside = (e[:, 0] >= xmin) & (e[:, 0] <= xmax) & (e[:, 1] >= ymin) & (e[:, 1] <= ymax)
        if not np.all(inside):
            raise ValueError(f"{int(np.sum(~inside))} events lie outside the window {self.window}.")
        return self

    @property
    def n(self) -> int:
        return len(self.events)

    @property
    def area(self) -> float:
        xmin, xmax, ymin, ymax = self.window
        return (xmax - xmin) * (ymax - ymin)


class LgcpSample(BaseModel):
    """
    One state of the Cox process sampler.

    Attributes:
        beta0 (float): Log-intensity intercept.
        beta1 (float): Covariate coefficient.
        sigma2_z (float): Variance of the latent field.
        w (np.ndarray): Latent field per grid cell.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    beta0: float = 0.0
    beta1: float = 0.0
    sigma2_z: float = Field(1.0, gt=0)
    w: np.ndarray

    @field_validator("w", mode="before")
    @classmethod
    def _check_field(cls, value):
        arr = np.asarray(value, dtype=float).ravel()
        if not np.all(np.isfinite(arr)):
            raise ValueError("Latent field values must be finite.")
        return arr

    def log_intensity(self, x_values: np.ndarray) -> np.ndarray:
        return self.beta0 + self.beta1 * np.asarray(x_values) + self.w


class LgcpPriors(BaseModel):
    """N(0, 100) on beta0 and beta1, IG(2, 0.1) on sigma2_z."""

    beta0: NormalPrior = NormalPrior()
    beta1: NormalPrior = NormalPrior()
    sigma2_z: InverseGammaPrior = InverseGammaPrior()


class LgcpChain(BaseModel):
    """
    Retained draws of a Cox process fit.

    Attributes:
        samples (List[LgcpSample]): Draws in iteration order.
        grid (GridSpec): Grid the latent field lives on.
        phi_z (float): Fixed decay of the latent field.
        acceptance (Dict[str, float]): Post burn-in acceptance rates.
        config (McmcConfig): Settings of the run.
        seed (int): Seed of the run.
    """

    samples: List[LgcpSample]
    grid: GridSpec
    phi_z: float = Field(..., gt=0)
    acceptance: Dict[str, float] = {}
    config: McmcConfig = McmcConfig()
    seed: int = 0

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index) -> LgcpSample:
        return self.samples[index]

    def __iter__(self):
        return iter(self.samples)

    def as_array(self) -> np.ndarray:
        return np.array([[s.beta0, s.beta1, s.sigma2_z] for s in self.samples]).reshape(-1, 3)

    def column(self, name: str) -> np.ndarray:
        return self.as_array()[:, LGCP_PARAM_NAMES.index(name)]

    def fields(self) -> np.ndarray:
        return np.stack([s.w for s in self.samples])

    def credible_interval(self, name: str, level: float = 0.95) -> Tuple[float, float]:
        tail = (1.0 - level) / 2.0
        lo, hi = np.quantile(self.column(name), [tail, 1.0 - tail])
        return float(lo), float(hi)


class IntensitySurface(BaseModel):
    """
    Cellwise intensity and log intensity.

    Attributes:
        intensity (SurfaceGrid): lambda per cell.
        log_intensity (SurfaceGrid): Z = log lambda per cell.
    """

    intensity: SurfaceGrid
    log_intensity: SurfaceGrid

    @model_validator(mode="after")
    def _check_consistent(self):
        if not np.allclose(
            self.intensity.values, np.exp(self.log_intensity.values), rtol=1e-12, equal_nan=True
        ):
            raise ValueError("Intensity must equal exp(log intensity) in every cell.")
        return self


def _check_aligned(x_grid: SurfaceGrid, grid: GridSpec):
    if x_grid.grid != grid:
        raise DomainError("Covariate surface and likelihood grid differ.")
    if np.any(x_grid.missing):
        raise DomainError("Covariate surface has missing cells.")


def _grid_log_likelihood(eta: np.ndarray, counts: np.ndarray, cell_area: float) -> float:
    return float(counts @ eta - cell_area * np.sum(np.exp(eta)))


def lgcp_log_likelihood(
    sample: LgcpSample,
    pattern: PointPattern,
    x_grid: SurfaceGrid,
    grid: GridSpec,
) -> float:
    """
    Gridded Poisson log-likelihood of a point pattern.

    sum_i log lambda(cell of s_i) - sum_l |A_l| exp(beta0 + beta1 X(A_l) + w(A_l)).

    Args:
        sample (LgcpSample): Parameters and latent field.
        pattern (PointPattern): Observed events.
        x_grid (SurfaceGrid): Covariate per cell, aligned with `grid`.
        grid (GridSpec): Likelihood grid.

    Returns:
        float: The log-likelihood.

    Raises:
        DomainError: If events fall outside the grid or the surfaces are misaligned.
    """

    _check_aligned(x_grid, grid)
    if len(sample.w) != grid.n_cells:
        raise DomainError(f"Latent field has {len(sample.w)} cells, grid has {grid.n_cells}.")

    counts = grid.counts(pattern.events)
    return _grid_log_likelihood(sample.log_intensity(x_grid.values), counts, grid.cell_area)


def _slice_transition(
    w: np.ndarray,
    prior_factor: np.ndarray,
    loglik: Callable[[np.ndarray], float],
    rng: np.random.Generator,
    current: float,
) -> Tuple[np.ndarray, float]:
    nu = prior_factor @ rng.standard_normal(len(w))
    threshold = current + math.log(rng.uniform())

    angle = rng.uniform(0.0, 2.0 * math.pi)
    lower, upper = angle - 2.0 * math.pi, angle

    while True:
        proposal = w * math.cos(angle) + nu * math.sin(angle)
        value = loglik(proposal)
        if value > threshold:
            return proposal, value

        if angle < 0.0:
            lower = angle
        else:
            upper = angle
        angle = rng.uniform(lower, upper)


def elliptical_slice_step(
    w: np.ndarray,
    prior_factor: np.ndarray,
    loglik: Callable[[np.ndarray], float],
    seed,
    current_loglik: Optional[float] = None,
) -> np.ndarray:
    """
    One elliptical slice sampling transition for a field with prior N(0, F F').

    Args:
        w (np.ndarray): Current field.
        prior_factor (np.ndarray): Factor F of the prior covariance.
        loglik (Callable): Log-likelihood of a field.
        seed: Seed or generator.
        current_loglik (Optional[float]): loglik(w) if already known.

    Returns:
        np.ndarray: The next field.

    Raises:
        DomainError: If the log-likelihood at `w` is not finite.
    """

    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    current = loglik(w) if current_loglik is None else current_loglik

    if not math.isfinite(current):
        raise DomainError("Log-likelihood is not finite at the current field.")

    proposal, _ = _slice_transition(np.asarray(w, dtype=float), prior_factor, loglik, rng, current)
    return proposal


def field_correlation_factor(grid: GridSpec, phi: float) -> np.ndarray:
    """Cholesky factor of the Matérn 3/2 correlation between cell centroids."""

    centroids = grid.centroids
    return cholesky_with_ridge(matern32_correlation(cdist(centroids, centroids), phi))


def fit_lgcp(
    pattern: PointPattern,
    x_grid: SurfaceGrid,
    grid: GridSpec,
    phi_z: float,
    priors: Optional[LgcpPriors] = None,
    cfg: Optional[McmcConfig] = None,
    verbose: bool = False,
) -> LgcpChain:
    """
    Samples the posterior of a log-Gaussian Cox process with fixed decay.

    Each iteration moves the latent field by elliptical slice sampling and then
    updates (beta0, beta1) and log sigma2_z by adaptive Metropolis. The field is
    kept as sigma_z times a unit-variance field, so a variance move rescales it.

    Args:
        pattern (PointPattern): Observed events.
        x_grid (SurfaceGrid): Covariate per cell, aligned with `grid`.
        grid (GridSpec): Likelihood grid.
        phi_z (float): Fixed decay of the latent field.
        priors (Optional[LgcpPriors]): Priors. Defaults to LgcpPriors().
        cfg (Optional[McmcConfig]): Run settings. Defaults to McmcConfig().
        verbose (bool): Show a progress bar.

    Returns:
        LgcpChain: The retained draws with acceptance rates.
    """

    if not phi_z > 0:
        raise DomainError(f"phi_z must be positive, got {phi_z}.")

    priors = priors or LgcpPriors()
    cfg = cfg or McmcConfig()
    _check_aligned(x_grid, grid)

    x = x_grid.values
    if np.ptp(x) == 0.0:
        message = "Covariate surface is constant; beta1 is not identifiable."
        logger.warning(message)
        warnings.warn(message, UserWarning, stacklevel=2)

    rng = make_rng(cfg.seed)
    counts = grid.counts(pattern.events)
    area = grid.cell_area
    factor = field_correlation_factor(grid, phi_z)

    def loglik(beta: np.ndarray, w: np.ndarray) -> float:
        return _grid_log_likelihood(beta[0] + beta[1] * x + w, counts, area)

    rate = max(pattern.n, 0.5) / (area * grid.n_cells)
    beta = np.array([math.log(rate), 0.0])
    log_s2 = math.log(priors.sigma2_z.center)
    unit_field = np.zeros(grid.n_cells)

    current = loglik(beta, unit_field)
    if not math.isfinite(current):
        raise InitializationError(
            "The Cox process likelihood is not finite at the initial values. "
            "Consider rescaling the coordinates or the covariate."
        )

    x_scale = float(np.std(x)) or 1.0
    regression = MetropolisBlock(
        name="regression",
        scales=[
            cfg.proposal_scales.get("beta0", 0.05),
            cfg.proposal_scales.get("beta1", 0.05 / x_scale),
        ],
        window=cfg.adaptation_window,
        target=cfg.target_acceptance,
    )
    variance = MetropolisBlock(
        name="sigma2_z",
        scales=[cfg.proposal_scales.get("sigma2_z", 0.3)],
        window=cfg.adaptation_window,
        target=cfg.target_acceptance,
    )

    def beta_prior(b: np.ndarray) -> float:
        return priors.beta0.log_pdf(float(b[0])) + priors.beta1.log_pdf(float(b[1]))

    def s2_prior(z: float) -> float:
        # log-scale density includes the Jacobian of sigma2 = exp(z)
        return priors.sigma2_z.log_pdf(math.exp(z)) + z

    if verbose:
        rich.print(
            Panel(
                "\n".join(
                    [
                        f"Events: [bold]{pattern.n}[/bold]",
                        f"Grid: {grid.nx} x {grid.ny} cells, phi_z = {phi_z:g}",
                        f"Iterations: {cfg.iterations} (burn-in {cfg.burn_in}, thin {cfg.thin})",
                    ]
                ),
                title="[bold]Cox process sampling[/bold]",
                expand=False,
            )
        )

    samples: List[LgcpSample] = []
    progress = Progress(disable=not verbose)

    with progress:
        pbar = setup_pbar("Sampling", cfg.iterations, progress)

        for iteration in range(cfg.iterations):
            adapting = iteration < cfg.burn_in
            if iteration == cfg.burn_in // 2:
                regression.reshape_from_history()
                variance.reshape_from_history()

            sigma = math.exp(0.5 * log_s2)
            unit_field, current = _slice_transition(
                unit_field,
                factor,
                lambda f: loglik(beta, sigma * f),
                rng,
                current,
            )

            field = sigma * unit_field
            beta, target, _ = regression.step(
                beta,
                current + beta_prior(beta),
                lambda b: loglik(b, field) + beta_prior(b),
                rng,
                adapting,
            )
            current = target - beta_prior(beta)

            z, target, _ = variance.step(
                np.array([log_s2]),
                current + s2_prior(log_s2),
                lambda zz: loglik(beta, math.exp(0.5 * zz[0]) * unit_field) + s2_prior(float(zz[0])),
                rng,
                adapting,
            )
            log_s2 = float(z[0])
            current = target - s2_prior(log_s2)

            if cfg.is_retained(iteration):
                samples.append(
                    LgcpSample(
                        beta0=float(beta[0]),
                        beta1=float(beta[1]),
                        sigma2_z=math.exp(log_s2),
                        w=math.exp(0.5 * log_s2) * unit_field,
                    )
                )

            progress.update(pbar, advance=1)

    acceptance = {
        "regression": regression.acceptance_rate,
        "sigma2_z": variance.acceptance_rate,
    }
    logger.info("Finished %d Cox process iterations, acceptance %s", cfg.iterations, acceptance)

    return LgcpChain(
        samples=samples,
        grid=grid,
        phi_z=phi_z,
        acceptance=acceptance,
        config=cfg,
        seed=cfg.seed,
    )


def k_function(pattern: PointPattern, radii) -> np.ndarray:
    """
    Border-corrected estimate of Ripley's K function.

    Only events at least r from the window boundary act as centres at radius r.

    Args:
        pattern (PointPattern): Events.
        radii: Radii at which to estimate.

    Returns:
        np.ndarray: K estimates; NaN where no event qualifies as a centre.
    """

    radii = np.asarray(radii, dtype=float)
    if pattern.n < 2:
        return np.full(radii.shape, np.nan)

    xmin, xmax, ymin, ymax = pattern.window
    e = pattern.events
    border = np.min(
        np.column_stack([e[:, 0] - xmin, xmax - e[:, 0], e[:, 1] - ymin, ymax - e[:, 1]]), axis=1
    )

    dist = cdist(e, e)
    np.fill_diagonal(dist, np.inf)
    intensity = pattern.n / pattern.area

    estimate = np.full(radii.shape, np.nan)
    for k, r in enumerate(radii.ravel()):
        centres = border >= r
        n_centres = int(np.sum(centres))
        if n_centres == 0:
            continue
        pairs = np.sum(dist[centres] <= r)
        estimate.flat[k] = pairs / (intensity * n_centres)

    return estimate


def lgcp_k_function(radii, sigma2: float, phi: float, n_steps: int = 2000) -> np.ndarray:
    """
    K function of a log-Gaussian Cox process with Matérn 3/2 field.

    K(r) = pi r^2 + 2 pi int_0^r t (exp(sigma2 rho(t)) - 1) dt.
    """

    radii = np.asarray(radii, dtype=float)
    r_max = float(np.max(radii)) if radii.size else 0.0
    t = np.linspace(0.0, r_max, n_steps + 1)
    excess = t * np.expm1(sigma2 * matern32_correlation(t, phi))
    cumulative = integrate.cumulative_trapezoid(excess, t, initial=0.0)

    return math.pi * radii**2 + 2.0 * math.pi * np.interp(radii, t, cumulative)


class MinimumContrastFit(BaseModel):
    """
    Result of a K-function contrast fit.

    Attributes:
        phi (float): Decay minimizing the contrast.
        sigma2 (float): Profiled variance at `phi`.
        contrast (float): Minimal contrast.
        profile_phi (List[float]): Decays of the coarse search.
        profile_contrast (List[float]): Profiled contrast at each coarse decay.
    """

    phi: float
    sigma2: float
    contrast: float
    profile_phi: List[float]
    profile_contrast: List[float]


def _contrast(k_hat: np.ndarray, radii: np.ndarray, sigma2: float, phi: float) -> float:
    diff = k_hat**0.25 - lgcp_k_function(radii, sigma2, phi) ** 0.25
    return float(integrate.trapezoid(diff**2, radii))


def minimum_contrast_fit(
    pattern: PointPattern,
    bounds: Tuple[float, float] = (0.01, 2.0),
    sigma2_grid: Optional[Sequence[float]] = None,
    n_radii: int = 64,
    n_phi: int = 40,
    flat_tolerance: float = 1e-3,
    csr_critical: float = CSR_L_CRITICAL,
) -> MinimumContrastFit:
    """
    Fits the decay of a Cox process field by minimum contrast on the K function.

    The contrast is int_0^r_max (K_hat^(1/4) - K^(1/4))^2 dr with r_max a quarter
    of the shorter window side. The variance is profiled over `sigma2_grid` for
    each decay; the decay is located on a log-spaced grid and refined by a
    bounded scalar search between the neighbours of the best grid point.

    Args:
        pattern (PointPattern): Events; at least 30 are needed.
        bounds (Tuple[float, float]): Search interval for the decay.
        sigma2_grid (Optional[Sequence[float]]): Candidate variances.
        n_radii (int): Number of radii in the contrast.
        n_phi (int): Number of decays in the coarse search.
        flat_tolerance (float): Relative spread of the profile below which it
            counts as flat.
        csr_critical (float): Multiple of sqrt(area) / n that the largest excess
            of the L function over r must reach for the pattern to count as
            clustered; 0 disables the check.

    Returns:
        MinimumContrastFit: The fit and its coarse profile.

    Raises:
        NonIdentifiableError: If the pattern shows no clustering, the minimum sits
            on a bound or the profile is flat.
        DomainError: If there are too few events or the bounds are invalid.
    """

    lo, hi = bounds
    if not 0 < lo < hi:
        raise DomainError(f"Invalid decay bounds {bounds}.")
    if pattern.n < MIN_CONTRAST_EVENTS:
        raise DomainError(
            f"Minimum contrast needs at least {MIN_CONTRAST_EVENTS} events, got {pattern.n}."
        )

    xmin, xmax, ymin, ymax = pattern.window
    r_max = 0.25 * min(xmax - xmin, ymax - ymin)
    radii = np.linspace(r_max / n_radii, r_max, n_radii)
    k_hat = k_function(pattern, radii)

    keep = np.isfinite(k_hat)
    radii, k_hat = radii[keep], k_hat[keep]

    excess = float(np.max(np.sqrt(k_hat / math.pi) - radii))
    band = csr_critical * math.sqrt(pattern.area) / pattern.n
    if excess < band:
        raise NonIdentifiableError(
            f"The L function exceeds r by at most {excess:.3g}, within the {band:.3g} band of "
            "complete spatial randomness; the pattern shows no clustering signal."
        )

    s2_grid = np.asarray(sigma2_grid if sigma2_grid is not None else np.geomspace(0.01, 10.0, 60))

    def profile(phi: float) -> Tuple[float, float]:
        values = [_contrast(k_hat, radii, s2, phi) for s2 in s2_grid]
        best = int(np.argmin(values))
        return values[best], float(s2_grid[best])

    phis = np.geomspace(lo, hi, n_phi)
    contrasts = np.array([profile(phi)[0] for phi in phis])
    best = int(np.argmin(contrasts))

    spread = (contrasts.max() - contrasts.min()) / max(contrasts.max(), 1e-300)
    if spread < flat_tolerance:
        raise NonIdentifiableError(
            "The contrast is flat in the decay; the pattern shows no clustering signal."
        )
    if best in (0, n_phi - 1):
        raise NonIdentifiableError(
            f"The contrast is minimized at the bound {phis[best]:g} of {bounds}; "
            "the decay is not identifiable within the search interval."
        )

    result = optimize.minimize_scalar(
        lambda log_phi: profile(math.exp(log_phi))[0],
        bounds=(math.log(phis[best - 1]), math.log(phis[best + 1])),
        method="bounded",
    )
    phi = math.exp(result.x)
    contrast, sigma2 = profile(phi)

    logger.info("Minimum contrast decay %.4g (sigma2 %.4g)", phi, sigma2)
    return MinimumContrastFit(
        phi=phi,
        sigma2=sigma2,
        contrast=contrast,
        profile_phi=phis.tolist(),
        profile_contrast=contrasts.tolist(),
    )


def minimum_contrast_phi(
    pattern: PointPattern,
    grid: Optional[GridSpec] = None,
    bounds: Tuple[float, float] = (0.01, 2.0),
    **kwargs,
) -> float:
    """Minimum contrast estimate of the latent field decay; see `minimum_contrast_fit`."""

    if grid is not None and tuple(grid.window) != tuple(pattern.window):
        raise DomainError("Grid window and pattern window differ.")
    return minimum_contrast_fit(pattern, bounds=bounds, **kwargs).phi


class LgcpRealization(BaseModel):
    """
    A simulated Cox process with its latent surfaces.

    Attributes:
        pattern (PointPattern): Events.
        x_grid (SurfaceGrid): Covariate per cell.
        w (np.ndarray): Latent field per cell.
        intensity (SurfaceGrid): True intensity per cell.
        x_data (Optional[Dataset]): Scattered covariate observations.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    pattern: PointPattern
    x_grid: SurfaceGrid
    w: np.ndarray
    intensity: SurfaceGrid
    x_data: Optional[Dataset] = None

    @property
    def expected_count(self) -> float:
        return float(np.sum(self.intensity.values) * self.intensity.grid.cell_area)


def simulate_covariate(
    grid: GridSpec,
    theta: ThetaSample,
    seed: int,
    n_obs: int = 0,
) -> Tuple[SurfaceGrid, Optional[Dataset]]:
    """
    Draws a smooth covariate surface at the cell centroids.

    With `n_obs > 0` the same realization is also observed at uniformly drawn
    sites, giving the scattered data a covariate-only fit starts from.
    """

    rng = make_rng(seed)
    centroids = grid.centroids
    sites = uniform_locations(n_obs, grid.window, rng) if n_obs else np.zeros((0, 2))
    points = np.vstack([centroids, sites])

    cov = theta.sigma2_x * matern32_correlation(cdist(points, points), theta.phi_x)
    values = theta.alpha0 + cholesky_with_ridge(cov) @ rng.standard_normal(len(points))

    x_grid = SurfaceGrid(grid=grid, values=values[: grid.n_cells], label="covariate")
    x_data = None
    if n_obs:
        x_data = Dataset(locations=sites, x=values[grid.n_cells :])

    return x_grid, x_data


def simulate_lgcp(
    grid: GridSpec,
    x_grid: SurfaceGrid,
    beta0: float,
    beta1: float,
    sigma2_z: float,
    phi_z: float,
    seed: int,
) -> LgcpRealization:
    """
    Simulates a Cox process on a grid.

    The latent field is drawn at the centroids; each cell receives a Poisson
    number of events with mean |A_l| lambda_l, placed uniformly in the cell.

    Args:
        grid (GridSpec): Simulation grid.
        x_grid (SurfaceGrid): Covariate per cell.
        beta0 (float): Log-intensity intercept.
        beta1 (float): Covariate coefficient.
        sigma2_z (float): Latent field variance.
        phi_z (float): Latent field decay.
        seed (int): Seed of the draw.

    Returns:
        LgcpRealization: The pattern with its latent surfaces.
    """

    _check_aligned(x_grid, grid)
    rng = make_rng(seed)

    factor = field_correlation_factor(grid, phi_z)
    w = math.sqrt(sigma2_z) * (factor @ rng.standard_normal(grid.n_cells))
    intensity = np.exp(beta0 + beta1 * x_grid.values + w)

    counts = rng.poisson(grid.cell_area * intensity)
    cells = np.repeat(np.arange(grid.n_cells), counts)
    dx, dy = grid.cell_size
    lower = grid.centroids[cells] - np.array([dx / 2, dy / 2])
    events = lower + rng.uniform(size=(len(cells), 2)) * np.array([dx, dy])

    return LgcpRealization(
        pattern=PointPattern(events=events, window=grid.window),
        x_grid=x_grid,
        w=w,
        intensity=SurfaceGrid(grid=grid, values=intensity, label="intensity"),
    )


def covariate_surface(
    x_chain: PosteriorChain,
    x_data: Dataset,
    grid: GridSpec,
    max_draws: Optional[int] = 200,
) -> SurfaceGrid:
    """Covariate kriged from scattered observations to the cell centroids."""

    values = krige_covariate(x_chain, x_data, grid.centroids, max_draws=max_draws)
    return SurfaceGrid(grid=grid, values=values, label="kriged covariate")


def intensity_surface(chain: LgcpChain, x_grid: SurfaceGrid) -> IntensitySurface:
    """Posterior median log intensity per cell and its exponential."""

    _check_aligned(x_grid, chain.grid)
    z = np.stack([s.log_intensity(x_grid.values) for s in chain])
    log_surface = summarize_surface(z, chain.grid, "median", label="posterior median log intensity")

    return IntensitySurface(
        intensity=log_surface.map(np.exp, label="exp(posterior median log intensity)"),
        log_intensity=log_surface,
    )


def intensity_composition(
    chain: LgcpChain,
    x_chain: PosteriorChain,
    x_grid: SurfaceGrid,
    targets: GridSpec,
    seed: int,
    n_workers: int = 1,
    mean_only: bool = False,
    max_draws: Optional[int] = None,
    verbose: bool = False,
) -> CompositionResult:
    """
    Joint draws of (Z, X, grad Z, grad X) at target centroids, one per Cox process draw.

    Each draw conditions on Z = beta0 + beta1 X + w and X at the fit grid
    centroids, with the covariate field parameters taken from the
    covariate-only chain (cycled when it is shorter).

    Args:
        chain (LgcpChain): Cox process draws.
        x_chain (PosteriorChain): Covariate-only fit.
        x_grid (SurfaceGrid): Covariate at the fit grid centroids.
        targets (GridSpec): Grid whose centroids are the targets.
        seed (int): Master seed.
        n_workers (int): Number of worker threads.
        mean_only (bool): Use conditional means instead of draws.
        max_draws (Optional[int]): Evenly thin the chain to at most this many draws.
        verbose (bool): Show a progress bar.

    Returns:
        CompositionResult: Draws indexed by Cox process draw.
    """

    _check_aligned(x_grid, chain.grid)
    if len(chain) == 0 or len(x_chain) == 0:
        raise DomainError("Intensity gradients need nonempty chains.")

    index = np.arange(len(chain))
    if max_draws is not None and len(index) > max_draws:
        index = np.unique(np.linspace(0, len(chain) - 1, max_draws).astype(int))

    centroids = chain.grid.centroids
    target_spec = PredictionTargets.at(targets.centroids)

    def conditional_for(k: int):
        draw_index = int(index[k])
        draw = chain[draw_index]
        x_theta = x_chain[draw_index % len(x_chain)]
        theta = ThetaSample(
            alpha0=x_theta.alpha0,
            sigma2_x=x_theta.sigma2_x,
            phi_x=x_theta.phi_x,
            beta0=draw.beta0,
            beta1=draw.beta1,
            sigma2_y=draw.sigma2_z,
            phi_y=chain.phi_z,
        )
        data = Dataset(locations=centroids, x=x_grid.values, y=draw.log_intensity(x_grid.values))
        return conditional_gradient_distribution(theta, data, target_spec)

    return run_composition(
        len(index),
        conditional_for,
        seed=seed,
        n_workers=n_workers,
        mean_only=mean_only,
        verbose=verbose,
    )


def intensity_ratio_draws(result: CompositionResult, u: UnitVector) -> np.ndarray:
    """D_u lambda / D_u X = exp(Z) D_u Z / D_u X for every draw and target."""

    grad_lambda = chain_rule_transform("log-intensity", result.stack("y"), result.stack("grad_y"))
    return lds_ratio(grad_lambda, result.stack("grad_x"), u)


def intensity_gradient_surface(
    chain: LgcpChain,
    x_chain: PosteriorChain,
    x_grid: SurfaceGrid,
    u: UnitVector,
    targets: Optional[GridSpec] = None,
    seed: int = 0,
    result: Optional[CompositionResult] = None,
    **kwargs,
) -> SurfaceGrid:
    """
    Posterior median of the intensity sensitivity D_u lambda / D_u X.

    Args:
        chain (LgcpChain): Cox process draws.
        x_chain (PosteriorChain): Covariate-only fit.
        x_grid (SurfaceGrid): Covariate at the fit grid centroids.
        u (UnitVector): Direction.
        targets (Optional[GridSpec]): Target grid; defaults to the interior
            vertices of the fit grid.
        seed (int): Master seed.
        result (Optional[CompositionResult]): Draws from an earlier
            `intensity_composition` over `targets`; sampled afresh when absent.
        **kwargs: Passed to `intensity_composition`.

    Returns:
        SurfaceGrid: Median ratio per target cell.
    """

    targets = targets or chain.grid.staggered()
    if result is None:
        result = intensity_composition(chain, x_chain, x_grid, targets, seed, **kwargs)
    return summarize_surface(
        intensity_ratio_draws(result, u), targets, "median", label="posterior median D_u lambda / D_u X"
    )


def intensity_discrepancy_surface(
    chain: LgcpChain,
    x_chain: PosteriorChain,
    x_grid: SurfaceGrid,
    targets: Optional[GridSpec] = None,
    seed: int = 0,
    result: Optional[CompositionResult] = None,
    **kwargs,
) -> SurfaceGrid:
    """Posterior median angular discrepancy between grad lambda and grad X."""

    targets = targets or chain.grid.staggered()
    if result is None:
        result = intensity_composition(chain, x_chain, x_grid, targets, seed, **kwargs)
    values = disc_draws(result.stack("grad_y"), result.stack("grad_x"))
    return summarize_surface(values, targets, "median", label="posterior median disc")
