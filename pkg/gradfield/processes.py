"""Derived sensitivity processes built on gradient draws.

Covers directional derivatives, the local directional sensitivity ratio and
its Cauchy scale, maximum-gradient angles with their joint density at one
location, the angular discrepancy, the joint CDF of two ratios, and chain rule
transforms for log-intensity and probit surfaces.
"""

import logging
import math
import warnings
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy import integrate
from scipy.special import ndtr, ndtri, owens_t
from scipy.stats import chi, norm, qmc

from gradfield.errors import DomainError
from gradfield.grid import GridSpec, SurfaceGrid
from gradfield.kernel import UnitVector
from gradfield.model import ThetaSample

logger = logging.getLogger(__name__)

ZERO_THRESHOLD = 1e-300
ATILDE_THRESHOLD = 1e-12
QUADRATURE_RATIO_LIMIT = 10.0
QMC_POINTS = 2**20
QMC_REPLICATES = 8
PHI0 = 1.0 / math.sqrt(2.0 * math.pi)


def directional_derivative(grad, u: UnitVector):
    """u . grad, broadcast over gradients of shape (..., 2)."""

    result = np.asarray(grad, dtype=float) @ u.as_array()
    return float(result) if np.ndim(result) == 0 else result


def lds_ratio(grad_y, grad_x, u: UnitVector):
    """
    Local directional sensitivity D_u Y / D_u X.

    A denominator below 1e-300 in magnitude gives an infinity carrying the sign
    of the quotient. When the numerator vanishes as well the value is NaN,
    which marks it missing.

    Args:
        grad_y: Response gradient(s) of shape (..., 2).
        grad_x: Covariate gradient(s) of shape (..., 2).
        u (UnitVector): Direction.

    Returns:
        The ratio, a float for single gradients.
    """

    num = np.asarray(directional_derivative(grad_y, u), dtype=float)
    den = np.asarray(directional_derivative(grad_x, u), dtype=float)

    tiny_den = np.abs(den) < ZERO_THRESHOLD
    tiny_num = np.abs(num) < ZERO_THRESHOLD

    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = num / np.where(tiny_den, 1.0, den)

    signed_inf = np.copysign(np.inf, num) * np.copysign(1.0, den)
    ratio = np.where(tiny_den, signed_inf, ratio)
    ratio = np.where(tiny_den & tiny_num, np.nan, ratio)

    return float(ratio) if ratio.ndim == 0 else ratio


def cauchy_scale(theta: ThetaSample) -> float:
    """Scale sigma_y phi_y / (sigma_x phi_x) of the sensitivity ratio's Cauchy law."""

    return math.sqrt(theta.sigma2_y) * theta.phi_y / (math.sqrt(theta.sigma2_x) * theta.phi_x)


def gradient_magnitude_scale(theta: ThetaSample) -> float:
    """Scale sigma_x phi_x of the Chi(2) law of the covariate gradient norm."""

    return math.sqrt(theta.sigma2_x) * theta.phi_x


def gradient_magnitude_cdf(r, theta: ThetaSample):
    return chi(df=2, scale=gradient_magnitude_scale(theta)).cdf(r)


def angle_of(grad):
    """
    Direction of maximum gradient as an angle in (-pi, pi].

    The two-argument arctangent differs from the [0, 2pi) convention only by a
    2pi shift on the lower half plane, which leaves every cosine of angle
    differences unchanged. Zero gradients have no direction and give NaN.
    """

    g = np.asarray(grad, dtype=float)
    angle = np.arctan2(g[..., 1], g[..., 0])
    angle = np.where(angle <= -math.pi, angle + 2.0 * math.pi, angle)
    angle = np.where(np.hypot(g[..., 0], g[..., 1]) < ZERO_THRESHOLD, np.nan, angle)

    return float(angle) if angle.ndim == 0 else angle


class AngleSample(BaseModel):
    """
    Maximum-gradient angles of the covariate and the response at one location.

    Attributes:
        theta_x (float): Covariate angle in (-pi, pi].
        theta_y (float): Response angle in (-pi, pi].
    """

    model_config = ConfigDict(frozen=True)

    theta_x: float
    theta_y: float

    @field_validator("theta_x", "theta_y")
    @classmethod
    def _check_range(cls, value):
        if not (-math.pi < value <= math.pi):
            raise ValueError(f"Angle {value} outside (-pi, pi].")
        return value

    @classmethod
    def from_gradients(cls, grad_x, grad_y) -> "AngleSample":
        theta_x, theta_y = angle_of(grad_x), angle_of(grad_y)
        if math.isnan(theta_x) or math.isnan(theta_y):
            raise DomainError("A zero gradient has no direction.")
        return cls(theta_x=theta_x, theta_y=theta_y)


def angular_discrepancy(theta_x, theta_y):
    """1 - cos(theta_x - theta_y) for raw angles in any convention."""

    value = 1.0 - np.cos(np.asarray(theta_x, dtype=float) - np.asarray(theta_y, dtype=float))
    value = np.clip(value, 0.0, 2.0)
    return float(value) if value.ndim == 0 else value


def disc(angles: AngleSample) -> float:
    """Angular discrepancy of one angle pair, in [0, 2]."""

    return angular_discrepancy(angles.theta_x, angles.theta_y)


class AngleDensityParams(BaseModel):
    """
    Constants of the joint maximum-gradient angle density at one location.

    Attributes:
        a (float): 1 / (sigma_y^2 phi_y^2).
        c (float): (sigma_y^2 phi_y^2 + beta^2 phi_x^2 sigma_x^2) / (sigma_x^2 phi_x^2).
        det_sigma (float): (sigma_x^2 phi_x^2)^2 (sigma_y^2 phi_y^2)^2.
        beta (float): Regression slope.
    """

    model_config = ConfigDict(frozen=True)

    a: float = Field(..., gt=0)
    c: float = Field(..., gt=0)
    det_sigma: float = Field(..., gt=0)
    beta: float

    @model_validator(mode="after")
    def _check_beta(self):
        if not math.isfinite(self.beta):
            raise ValueError("beta must be finite.")
        return self

    @classmethod
    def from_theta(cls, theta: ThetaSample) -> "AngleDensityParams":
        vx = theta.sigma2_x * theta.phi_x**2
        vy = theta.sigma2_y * theta.phi_y**2
        return cls(
            a=1.0 / vy,
            c=(vy + theta.beta1**2 * vx) / vx,
            det_sigma=vx**2 * vy**2,
            beta=theta.beta1,
        )

    def atilde(self, theta_x, theta_y):
        return math.sqrt(self.a) * self.beta * np.cos(np.asarray(theta_x) - np.asarray(theta_y))


def _bvn_orthant_zero(rho):
    """P(Z1 < 0, Z2 < 0) for standard normals with correlation rho."""
    return 0.25 + np.arcsin(rho) / (2.0 * math.pi)


def _angle_density(theta_x, theta_y, params: AngleDensityParams):
    a, c = params.a, params.c
    ac = a * c
    at = np.asarray(params.atilde(theta_x, theta_y), dtype=float)

    const = 1.0 / (a * (2.0 * math.pi) ** 1.5 * math.sqrt(params.det_sigma))
    gap = ac - at**2
    orthant = _bvn_orthant_zero(np.sqrt(at**2 / ac))
    tail = np.where(at > 0, orthant, 0.5 - orthant)

    general = (
        at**2 * PHI0 / (ac * gap) + math.sqrt(2.0 * math.pi) * at / gap**1.5 * tail + PHI0 / ac
    )
    value = const * np.where(np.abs(at) < ATILDE_THRESHOLD, PHI0 / ac, general)

    return float(value) if value.ndim == 0 else value


def angle_density(angles: Union[AngleSample, tuple], theta: ThetaSample):
    """
    Joint density of the covariate and response maximum-gradient angles at one location.

    The density depends on the angles only through their difference. At
    |A~| < 1e-12 the shared limit of the two branches is used, which for
    beta = 0 is the uniform density 1 / (4 pi^2).

    Args:
        angles (Union[AngleSample, tuple]): An angle pair, or a tuple of angle
            arrays (theta_x, theta_y) for vectorized evaluation.
        theta (ThetaSample): Model parameters.

    Returns:
        The nonnegative density value(s).
    """

    if isinstance(angles, AngleSample):
        theta_x, theta_y = angles.theta_x, angles.theta_y
    else:
        theta_x, theta_y = angles

    return _angle_density(theta_x, theta_y, AngleDensityParams.from_theta(theta))


def angle_density_normalization(theta: ThetaSample) -> float:
    """Integral of `angle_density` over (-pi, pi]^2 by two-dimensional adaptive quadrature."""

    params = AngleDensityParams.from_theta(theta)
    value, error = integrate.dblquad(
        lambda ty, tx: _angle_density(tx, ty, params),
        -math.pi,
        math.pi,
        -math.pi,
        math.pi,
        epsabs=1e-8,
        epsrel=1e-8,
    )

    if abs(value - 1.0) > 1e-3:
        logger.warning("Angle density integrates to %.6f (quadrature error %.1e)", value, error)

    return value


def max_gradient_projection(grad_y, grad_x):
    """
    Response change along the covariate's direction of maximum gradient.

    Returns:
        Tuple: (grad_x . grad_y / |grad_x|, grad_x . grad_y / |grad_x|^2), the
        response directional derivative and the sensitivity ratio in that
        direction. NaN where grad_x vanishes.
    """

    gy = np.asarray(grad_y, dtype=float)
    gx = np.asarray(grad_x, dtype=float)
    dot = np.sum(gx * gy, axis=-1)
    norm2 = np.sum(gx * gx, axis=-1)

    with np.errstate(divide="ignore", invalid="ignore"):
        zero = norm2 < ZERO_THRESHOLD**2
        derivative = np.where(zero, np.nan, dot / np.sqrt(np.where(zero, 1.0, norm2)))
        ratio = np.where(zero, np.nan, dot / np.where(zero, 1.0, norm2))

    return derivative, ratio


class CdfEstimate(BaseModel):
    """
    A probability with its numerical error estimate.

    Attributes:
        value (float): Estimate in [0, 1].
        error (float): Absolute error estimate.
        method (str): "exact", "quadrature" or "qmc".
    """

    value: float
    error: float = 0.0
    method: str = "exact"

    def __float__(self) -> float:
        return self.value


def _bvn_cdf(h, k, rho):
    """Standard bivariate normal CDF via Owen's T function, vectorized."""

    h = np.asarray(h, dtype=float)
    k = np.asarray(k, dtype=float)
    h = np.where(h == 0.0, 1e-12, h)
    k = np.where(k == 0.0, 1e-12, k)

    rho = np.asarray(rho, dtype=float)
    root = np.sqrt(1.0 - rho**2)
    correction = np.where(h * k > 0, 0.0, 0.5)

    return (
        0.5 * (ndtr(h) + ndtr(k))
        - owens_t(h, (k - rho * h) / (h * root))
        - owens_t(k, (h - rho * k) / (k * root))
        - correction
    )


def _check_cov(cov, name: str) -> np.ndarray:
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (2, 2) or not np.allclose(cov, cov.T):
        raise DomainError(f"{name} must be a symmetric 2 x 2 matrix.")
    if not np.all(np.linalg.eigvalsh(cov) > 0):
        raise DomainError(f"{name} must be positive definite.")
    return cov


def _ratio_integrand(m1, m2, r1, r2, sd_n, rho_n):
    """P(n1 / m1 < r1, n2 / m2 < r2 | m1, m2)."""

    sign = np.where(np.sign(m1) * np.sign(m2) >= 0, 1.0, -1.0)
    h = r1 * np.abs(m1) / sd_n[0]
    k = r2 * np.abs(m2) / sd_n[1]
    return _bvn_cdf(h, k, sign * rho_n)


def _marginal_ratio_cdf(r: float, var_n: float, var_m: float):
    if math.isinf(r):
        return CdfEstimate(value=1.0 if r > 0 else 0.0)

    sd_n, sd_m = math.sqrt(var_n), math.sqrt(var_m)
    value, error = integrate.quad(
        lambda m: 2.0 * ndtr(r * m / sd_n) * norm.pdf(m, scale=sd_m),
        0.0,
        np.inf,
        epsabs=1e-12,
    )
    return CdfEstimate(value=float(np.clip(value, 0.0, 1.0)), error=error, method="quadrature")


def _qmc_points(cov_x: np.ndarray, seed: int, n_points: int) -> np.ndarray:
    factor = np.linalg.cholesky(cov_x)
    log2_size = max(int(math.log2(max(n_points // QMC_REPLICATES, 1))), 4)
    reps = []
    for replicate in range(QMC_REPLICATES):
        sampler = qmc.Sobol(d=2, scramble=True, seed=np.random.default_rng([seed, replicate]))
        u = np.clip(sampler.random_base2(log2_size), 1e-16, 1 - 1e-16)
        reps.append(ndtri(u) @ factor.T)
    return np.stack(reps)


def joint_ratio_cdf(
    r1: float,
    r2: float,
    cov_y,
    cov_x,
    method: Literal["auto", "quadrature", "qmc"] = "auto",
    seed: int = 0,
    n_points: int = QMC_POINTS,
) -> CdfEstimate:
    """
    Joint CDF P(n1/m1 < r1, n2/m2 < r2) of two ratios of mean-zero normals.

    (n1, n2) and (m1, m2) are independent with covariances `cov_y` and `cov_x`.
    Given (m1, m2), the event is a bivariate normal orthant probability in
    (n1, n2) whose correlation flips with the sign of m1 m2; the four sign
    orthants of (m1, m2) are integrated separately by adaptive quadrature for
    |r| <= 10 and by randomized quasi-Monte Carlo otherwise. QMC uses common
    points for every (r1, r2), which keeps the estimate monotone.

    Args:
        r1 (float): First threshold; may be infinite.
        r2 (float): Second threshold; may be infinite.
        cov_y: Covariance of (n1, n2).
        cov_x: Covariance of (m1, m2).
        method (str): "auto", "quadrature" or "qmc".
        seed (int): Seed of the QMC scrambling.
        n_points (int): Total QMC points over all replicates.

    Returns:
        CdfEstimate: Probability with an error estimate.

    Raises:
        DomainError: If a covariance is not symmetric positive definite.
    """

    cov_y = _check_cov(cov_y, "cov_y")
    cov_x = _check_cov(cov_x, "cov_x")

    if (math.isinf(r1) and r1 < 0) or (math.isinf(r2) and r2 < 0):
        return CdfEstimate(value=0.0)
    if math.isinf(r1) and math.isinf(r2):
        return CdfEstimate(value=1.0)
    if math.isinf(r2):
        return _marginal_ratio_cdf(r1, cov_y[0, 0], cov_x[0, 0])
    if math.isinf(r1):
        return _marginal_ratio_cdf(r2, cov_y[1, 1], cov_x[1, 1])

    sd_n = np.sqrt(np.diag(cov_y))
    rho_n = cov_y[0, 1] / (sd_n[0] * sd_n[1])

    if method == "auto":
        method = "quadrature" if max(abs(r1), abs(r2)) <= QUADRATURE_RATIO_LIMIT else "qmc"

    if method == "qmc":
        points = _qmc_points(cov_x, seed, n_points)
        estimates = np.array(
            [_ratio_integrand(p[:, 0], p[:, 1], r1, r2, sd_n, rho_n).mean() for p in points]
        )
        error = estimates.std(ddof=1) / math.sqrt(len(estimates))
        value = float(np.clip(estimates.mean(), 0.0, 1.0))
        return CdfEstimate(value=value, error=float(error), method="qmc")

    sd_m = np.sqrt(np.diag(cov_x))
    prec = np.linalg.inv(cov_x)
    norm_const = 1.0 / (2.0 * math.pi * math.sqrt(np.linalg.det(cov_x)))
    bound = 12.0 * sd_m

    def density(m1, m2):
        quad_form = prec[0, 0] * m1**2 + 2 * prec[0, 1] * m1 * m2 + prec[1, 1] * m2**2
        return norm_const * math.exp(-0.5 * quad_form)

    value, error = 0.0, 0.0
    for s1 in (1.0, -1.0):
        for s2 in (1.0, -1.0):
            part, part_error = integrate.dblquad(
                lambda a2, a1: float(
                    _ratio_integrand(s1 * a1, s2 * a2, r1, r2, sd_n, rho_n)
                )
                * density(s1 * a1, s2 * a2),
                0.0,
                bound[0],
                0.0,
                bound[1],
                epsabs=1e-10,
                epsrel=1e-8,
            )
            value += part
            error += part_error

    return CdfEstimate(value=float(np.clip(value, 0.0, 1.0)), error=error, method="quadrature")


def cauchy_cdf(r, scale: float, location: float = 0.0):
    return 0.5 + np.arctan((np.asarray(r, dtype=float) - location) / scale) / math.pi


def chain_rule_transform(kind: Literal["log-intensity", "probit"], z, grad_z):
    """
    Gradient of g(Z) from Z and its gradient.

    For a log intensity the factor is exp(z); for a probit surface it is the
    standard normal density at z. z = -inf (a zero-intensity region) gives a
    zero gradient.

    Args:
        kind (str): "log-intensity" or "probit".
        z: Surface value(s).
        grad_z: Gradient(s) of shape (..., 2).

    Returns:
        np.ndarray: Transformed gradient(s) of shape (..., 2).
    """

    z = np.asarray(z, dtype=float)
    grad_z = np.asarray(grad_z, dtype=float)

    if kind == "log-intensity":
        factor = np.exp(z)
    elif kind == "probit":
        factor = norm.pdf(z)
    else:
        raise DomainError(f"Unknown transform '{kind}'.")

    return factor[..., None] * grad_z


def summarize_surface(
    values,
    grid: GridSpec,
    statistic: Union[Literal["median"], float] = "median",
    label: Optional[str] = None,
) -> SurfaceGrid:
    """
    Cellwise posterior summary of draws.

    NaN draws are excluded and counted per cell; infinite draws take part in
    the order statistics. Cells without any usable draw, or whose summary is
    infinite, are missing in the output.

    Args:
        values: Draws of shape (L, n_cells).
        grid (GridSpec): The lattice the cells belong to.
        statistic: "median" or a quantile level in (0, 1).
        label (Optional[str]): Statistic label; derived from `statistic` if absent.

    Returns:
        SurfaceGrid: The summary surface.
    """

    draws = np.atleast_2d(np.asarray(values, dtype=float))
    if draws.shape[1] != grid.n_cells:
        raise DomainError(
            f"Draws cover {draws.shape[1]} cells but the grid has {grid.n_cells}."
        )

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        if statistic == "median":
            summary = np.nanmedian(draws, axis=0)
            label = label or "posterior median"
        else:
            q = float(statistic)
            if not 0.0 < q < 1.0:
                raise DomainError(f"Quantile level {q} outside (0, 1).")
            summary = np.nanquantile(draws, q, axis=0)
            label = label or f"posterior {q:g} quantile"

    n_missing = np.isnan(draws).sum(axis=0)
    summary = np.where(np.isfinite(summary), summary, np.nan)

    empty = int(np.sum(n_missing == len(draws)))
    if empty:
        logger.warning("%d cells have no usable draws", empty)

    return SurfaceGrid(grid=grid, values=summary, label=label, n_missing=n_missing)


def ratio_draws(grad_y, grad_x, u: UnitVector) -> np.ndarray:
    """Sensitivity ratios for stacked gradients of shape (L, m, 2)."""
    return np.asarray(lds_ratio(grad_y, grad_x, u), dtype=float)


def disc_draws(grad_y, grad_x) -> np.ndarray:
    """Angular discrepancies for stacked gradients; NaN where a gradient vanishes."""
    return np.asarray(angular_discrepancy(angle_of(grad_x), angle_of(grad_y)), dtype=float)


def sensitivity_surface(result, grid: GridSpec, u: UnitVector, statistic="median") -> SurfaceGrid:
    """
    Cellwise summary of D_u Y / D_u X over composition draws at the grid centroids.

    Args:
        result (CompositionResult): Draws whose targets are `grid.centroids`.
        grid (GridSpec): The target lattice.
        u (UnitVector): Direction.
        statistic: "median" or a quantile level.

    Returns:
        SurfaceGrid: The summary surface.
    """

    values = ratio_draws(result.stack("grad_y"), result.stack("grad_x"), u)
    label = "posterior median D_u Y / D_u X" if statistic == "median" else None
    return summarize_surface(values, grid, statistic, label=label)


def discrepancy_surface(result, grid: GridSpec, statistic="median") -> SurfaceGrid:
    """Cellwise summary of disc(s) over composition draws at the grid centroids."""

    values = disc_draws(result.stack("grad_y"), result.stack("grad_x"))
    label = "posterior median disc" if statistic == "median" else None
    return summarize_surface(values, grid, statistic, label=label)
