"""Matérn (nu = 3/2) covariance analytics and the joint covariance of levels and gradients.

All functions accept separation vectors of shape (..., 2) and broadcast over
the leading axes. The joint ordering of a single location is
(Y, X, dY/ds1, dY/ds2, dX/ds1, dX/ds2).
"""

from typing import TYPE_CHECKING, Literal, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from gradfield.errors import DomainError
from gradfield.utils import as_points, check_distinct, cholesky_with_ridge

if TYPE_CHECKING:  # pragma: no cover
    from gradfield.model import ThetaSample

HESSIAN_ORIGIN_THRESHOLD = 1e-10
JOINT_LABELS = ("Y", "X", "dY1", "dY2", "dX1", "dX2")


class MaternParams(BaseModel):
    """
    Parameters of a Matérn covariance with smoothness fixed at 3/2.

    Attributes:
        sigma2 (float): Variance.
        phi (float): Decay in inverse spatial units.
        nu (float): Smoothness, always 3/2.
    """

    model_config = ConfigDict(frozen=True)

    sigma2: float = Field(..., gt=0)
    phi: float = Field(..., gt=0)
    nu: Literal[1.5] = 1.5


class UnitVector(BaseModel):
    """
    A direction in the plane. Any finite nonzero input is normalized on construction.

    Attributes:
        u1 (float): First component.
        u2 (float): Second component.
    """

    model_config = ConfigDict(frozen=True)

    u1: float
    u2: float

    @model_validator(mode="before")
    @classmethod
    def _normalize(cls, data):
        if isinstance(data, (list, tuple, np.ndarray)):
            data = {"u1": data[0], "u2": data[1]}

        u1, u2 = float(data["u1"]), float(data["u2"])
        norm = np.hypot(u1, u2)

        if not np.isfinite(norm) or norm == 0.0:
            raise ValueError(f"Direction ({u1}, {u2}) cannot be normalized.")

        return {"u1": u1 / norm, "u2": u2 / norm}

    @classmethod
    def of(cls, vector) -> "UnitVector":
        return cls.model_validate(list(vector))

    def as_array(self) -> np.ndarray:
        return np.array([self.u1, self.u2])

    def __neg__(self) -> "UnitVector":
        return UnitVector(u1=-self.u1, u2=-self.u2)


class JointCovBlock(BaseModel):
    """
    The 6 x 6 local covariance of (Y, X, grad Y, grad X) at zero separation.

    Attributes:
        matrix (np.ndarray): Symmetric 6 x 6 matrix in `JOINT_LABELS` order.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    matrix: np.ndarray

    @property
    def level_block(self) -> np.ndarray:
        return self.matrix[:2, :2]

    @property
    def gradient_block(self) -> np.ndarray:
        return self.matrix[2:, 2:]


def _lags(delta) -> Tuple[np.ndarray, np.ndarray]:
    d = np.asarray(delta, dtype=float)

    if d.shape[-1:] != (2,):
        raise DomainError(f"Separation vectors must have a trailing axis of 2, got {d.shape}.")

    if not np.all(np.isfinite(d)):
        raise DomainError("Separation vectors must be finite.")

    return d, np.linalg.norm(d, axis=-1)


def cov_matern32(delta, p: MaternParams):
    """
    Matérn 3/2 covariance sigma2 (1 + phi |d|) exp(-phi |d|).

    Args:
        delta: Separation vector(s) of shape (..., 2).
        p (MaternParams): Kernel parameters.

    Returns:
        Covariance value(s) of shape (...).

    Raises:
        DomainError: If any separation is not finite.
    """

    _, r = _lags(delta)
    return p.sigma2 * (1.0 + p.phi * r) * np.exp(-p.phi * r)


def grad_matern32(delta, p: MaternParams) -> np.ndarray:
    """
    Gradient of `cov_matern32` with respect to the separation vector.

    Args:
        delta: Separation vector(s) of shape (..., 2).
        p (MaternParams): Kernel parameters.

    Returns:
        np.ndarray: Gradient(s) of shape (..., 2).
    """

    d, r = _lags(delta)
    return -p.sigma2 * p.phi**2 * np.exp(-p.phi * r)[..., None] * d


def hess_matern32(delta, p: MaternParams) -> np.ndarray:
    """
    Hessian of `cov_matern32` with respect to the separation vector.

    Below a separation of 1e-10 the analytic limit -sigma2 phi^2 I is returned.

    Args:
        delta: Separation vector(s) of shape (..., 2).
        p (MaternParams): Kernel parameters.

    Returns:
        np.ndarray: Symmetric Hessian(s) of shape (..., 2, 2).
    """

    d, r = _lags(delta)

    small = r < HESSIAN_ORIGIN_THRESHOLD
    safe_r = np.where(small, 1.0, r)
    outer = d[..., :, None] * d[..., None, :]
    decay = p.sigma2 * p.phi**2 * np.exp(-p.phi * r)

    hess = -decay[..., None, None] * (np.eye(2) - p.phi * outer / safe_r[..., None, None])
    limit = -p.sigma2 * p.phi**2 * np.eye(2)

    return np.where(small[..., None, None], limit, hess)


def directional_cov(delta, u: UnitVector, p: MaternParams):
    """Covariance of directional derivatives in direction u at separation delta: -u' H u."""
    uu = u.as_array()
    return -np.einsum("i,...ij,j->...", uu, hess_matern32(delta, p), uu)


def finite_difference_cov(delta, u: UnitVector, h: float, p: MaternParams):
    """
    Covariances involving the finite-difference process at scale h in direction u.

    Args:
        delta: Separation s - s' of shape (..., 2).
        u (UnitVector): Direction.
        h (float): Finite-difference scale.
        p (MaternParams): Kernel parameters.

    Returns:
        Tuple: (Cov(W(s), W_uh(s')), Cov(W_uh(s), W_uh(s'))).
    """

    d = np.asarray(delta, dtype=float)
    hu = h * u.as_array()

    level_fd = (cov_matern32(d - hu, p) - cov_matern32(d, p)) / h
    fd_fd = (
        2.0 * cov_matern32(d, p) - cov_matern32(d + hu, p) - cov_matern32(d - hu, p)
    ) / h**2

    return level_fd, fd_fd


def _kernels(theta: "ThetaSample") -> Tuple[MaternParams, MaternParams, float]:
    k = MaternParams(sigma2=theta.sigma2_y, phi=theta.phi_y)
    g = MaternParams(sigma2=theta.sigma2_x, phi=theta.phi_x)
    return k, g, theta.beta1


def local_cov_block(theta: "ThetaSample") -> JointCovBlock:
    """
    Local covariance of (Y, X, grad Y, grad X) at a single location.

    Levels and gradients are uncorrelated at zero separation, so the matrix
    is block diagonal with a 2 x 2 level block and a 4 x 4 gradient block.

    Args:
        theta (ThetaSample): Model parameters.

    Returns:
        JointCovBlock: The 6 x 6 covariance.
    """

    origin = np.zeros((1, 2))
    levels = _level_cov(origin, origin, theta)
    grads = _gradient_cov(origin, origin, theta)

    matrix = np.zeros((6, 6))
    matrix[:2, :2] = levels
    matrix[2:, 2:] = grads

    return JointCovBlock(matrix=matrix)


def _level_cov(a: np.ndarray, b: np.ndarray, theta: "ThetaSample") -> np.ndarray:
    """Covariance of [Y(a), X(a)] with [Y(b), X(b)]."""

    k, g, beta = _kernels(theta)
    delta = a[:, None, :] - b[None, :, :]

    kk = cov_matern32(delta, k)
    gg = cov_matern32(delta, g)

    return np.block([[kk + beta**2 * gg, beta * gg], [beta * gg, gg]])


def _level_gradient_cov(a: np.ndarray, t: np.ndarray, theta: "ThetaSample") -> np.ndarray:
    """Covariance of [Y(a), X(a)] with [grad Y(t), grad X(t)], gradients interleaved per target."""

    k, g, beta = _kernels(theta)
    delta = a[:, None, :] - t[None, :, :]
    n, m = len(a), len(t)

    dk = -grad_matern32(delta, k).reshape(n, 2 * m)
    dg = -grad_matern32(delta, g).reshape(n, 2 * m)

    return np.block([[dk + beta**2 * dg, beta * dg], [beta * dg, dg]])


def _gradient_cov(t1: np.ndarray, t2: np.ndarray, theta: "ThetaSample") -> np.ndarray:
    """Covariance of [grad Y(t1), grad X(t1)] with [grad Y(t2), grad X(t2)]."""

    k, g, beta = _kernels(theta)
    delta = t1[:, None, :] - t2[None, :, :]
    m1, m2 = len(t1), len(t2)

    def flat(h):
        return -h.transpose(0, 2, 1, 3).reshape(2 * m1, 2 * m2)

    hk = flat(hess_matern32(delta, k))
    hg = flat(hess_matern32(delta, g))

    return np.block([[hk + beta**2 * hg, beta * hg], [beta * hg, hg]])


def joint_cov_blocks(
    obs, targets, theta: "ThetaSample"
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Blocks of the joint covariance of observed levels and target levels and gradients.

    Args:
        obs: Observation locations of shape (n, 2).
        targets: Target locations of shape (m, 2).
        theta (ThetaSample): Model parameters.

    Returns:
        Tuple: (S_oo, S_ot, S_tt) where the observed part is ordered
        [Y(obs), X(obs)] and the target part [Y(t), X(t), grad Y(t), grad X(t)].

    Raises:
        DuplicateLocationError: If any two locations coincide.
    """

    obs = as_points(obs, "observations")
    targets = as_points(targets, "targets")
    check_distinct(np.vstack([obs, targets]))

    s_oo = _level_cov(obs, obs, theta)
    s_ot = np.hstack([_level_cov(obs, targets, theta), _level_gradient_cov(obs, targets, theta)])

    lev_tt = _level_cov(targets, targets, theta)
    lg_tt = _level_gradient_cov(targets, targets, theta)
    s_tt = np.block([[lev_tt, lg_tt], [lg_tt.T, _gradient_cov(targets, targets, theta)]])

    return s_oo, s_ot, s_tt


def joint_cov_matrix(obs, targets, theta: "ThetaSample", check: bool = True) -> np.ndarray:
    """
    Covariance of (Y(obs), X(obs), Y(t), X(t), grad Y(t), grad X(t)).

    Args:
        obs: Observation locations of shape (n, 2).
        targets: Target locations of shape (m, 2); may be empty.
        theta (ThetaSample): Model parameters.
        check (bool): Verify positive semi-definiteness by a ridged Cholesky.

    Returns:
        np.ndarray: Symmetric matrix of size 2n + 6m.

    Raises:
        DuplicateLocationError: If any two locations coincide.
        FactorizationError: If the matrix is not PSD even after ridge escalation.
    """

    s_oo, s_ot, s_tt = joint_cov_blocks(obs, targets, theta)
    matrix = np.block([[s_oo, s_ot], [s_ot.T, s_tt]])

    if check:
        cholesky_with_ridge(matrix)

    return matrix


def matern32_correlation(distance, phi: float):
    """Matérn 3/2 correlation (1 + phi r) exp(-phi r) evaluated on distances."""
    r = np.asarray(distance, dtype=float)
    return (1.0 + phi * r) * np.exp(-phi * r)
