import logging
from typing import List, Tuple

import numpy as np
import scipy.linalg
import tenacity
from rich.progress import Progress, TaskID
from scipy.spatial import cKDTree

from gradfield.errors import DomainError, DuplicateLocationError, FactorizationError

logger = logging.getLogger(__name__)

RIDGE_START = 1e-8
RIDGE_MAX = 1e-4
DUPLICATE_TOLERANCE = 1e-9


def as_points(points, name: str = "locations") -> np.ndarray:
    """Casts an array-like of locations to a float array of shape (n, 2).

    Args:
        points: Sequence of (s1, s2) pairs or an array of shape (n, 2).
        name (str): Name used in error messages.

    Returns:
        np.ndarray: Array of shape (n, 2).

    Raises:
        DomainError: If the shape is wrong or any coordinate is not finite.
    """

    arr = np.asarray(points, dtype=float)

    if arr.size == 0:
        return arr.reshape(0, 2)

    if arr.ndim == 1 and arr.shape[0] == 2:
        arr = arr.reshape(1, 2)

    if arr.ndim != 2 or arr.shape[1] != 2:
        raise DomainError(f"{name} must have shape (n, 2), got {arr.shape}.")

    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contain non-finite coordinates.")

    return arr


def check_distinct(points: np.ndarray, tolerance: float = DUPLICATE_TOLERANCE):
    """Ensures no two locations coincide within `tolerance` coordinate units.

    Args:
        points (np.ndarray): Locations of shape (n, 2).
        tolerance (float): Coordinate tolerance. Defaults to 1e-9.

    Raises:
        DuplicateLocationError: Naming the first offending pair.
    """

    if len(points) < 2:
        return

    pairs = cKDTree(points).query_pairs(r=tolerance, p=np.inf, output_type="ndarray")

    if len(pairs) > 0:
        i, j = sorted(pairs.tolist())[0]
        raise DuplicateLocationError(int(i), int(j), tolerance)


def cholesky_with_ridge(cov: np.ndarray, exact_first: bool = False) -> np.ndarray:
    """Lower Cholesky factor of `cov`, adding an escalating diagonal ridge on failure.

    The ridge starts at 1e-8 times the mean diagonal and grows tenfold per
    attempt up to 1e-4 times the mean diagonal.

    Args:
        cov (np.ndarray): Symmetric matrix to factorize.
        exact_first (bool): Try the unmodified matrix before adding any ridge.

    Returns:
        np.ndarray: Lower triangular factor L with L @ L.T = cov + ridge * I.

    Raises:
        FactorizationError: If the matrix stays indefinite at the largest ridge.
    """

    cov = np.asarray(cov, dtype=float)

    if cov.size == 0:
        return cov.copy()

    scale = float(np.mean(np.diag(cov)))

    if not np.isfinite(scale) or scale <= 0.0:
        raise FactorizationError(
            f"Covariance matrix has an invalid mean diagonal ({scale})."
        )

    jitters = [0.0] if exact_first else []
    jitter = RIDGE_START
    while jitter <= RIDGE_MAX * (1 + 1e-9):
        jitters.append(jitter)
        jitter *= 10.0

    eye = np.eye(cov.shape[0])

    try:
        for attempt in tenacity.Retrying(
            stop=tenacity.stop_after_attempt(len(jitters)),
            retry=tenacity.retry_if_exception_type(np.linalg.LinAlgError),
            reraise=True,
        ):
            with attempt:
                ridge = jitters[attempt.retry_state.attempt_number - 1]
                factor = scipy.linalg.cholesky(
                    cov + ridge * scale * eye, lower=True, check_finite=True
                )
    except (np.linalg.LinAlgError, ValueError) as e:
        raise FactorizationError(
            f"Cholesky factorization failed with ridge up to {RIDGE_MAX:g} x mean diagonal."
        ) from e

    if ridge > RIDGE_START:
        logger.debug("Factorized %d x %d matrix with ridge %g", *cov.shape, ridge)

    return factor


def make_rng(seed: int) -> np.random.Generator:
    """Sequential generator for a single chain or simulation."""
    return np.random.default_rng(np.random.SeedSequence(seed))


def derive_seeds(seed: int, n: int) -> List[int]:
    """Independent child seeds for the stages of one command."""
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n, dtype=np.uint64)]


def theta_stream(seed: int, index: int) -> np.random.Generator:
    """Counter-based generator owned by one posterior draw.

    Streams depend only on (seed, index), so draws are identical whatever
    the number of workers.
    """
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence(seed, spawn_key=(index,)))
    )


def batch_means_se(samples: np.ndarray, n_batches: int = 50) -> np.ndarray:
    """Monte-Carlo standard error of a chain mean by non-overlapping batch means.

    Args:
        samples (np.ndarray): Chain of shape (n,) or (n, d).
        n_batches (int): Number of batches. Defaults to 50.

    Returns:
        np.ndarray: Standard error per column.
    """

    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]

    size = len(samples) // n_batches
    batches = samples[: size * n_batches].reshape(n_batches, size, -1).mean(axis=1)

    return np.sqrt(batches.var(axis=0, ddof=1) / n_batches).squeeze()


def setup_pbar(
    description: str,
    total: int,
    progress: Progress,
) -> TaskID:
    """
    Set up a progress bar for a sampling loop.

    Args:
        description (str): Label shown next to the bar.
        total (int): Number of steps.
        progress (Progress): The progress bar object.

    Returns:
        TaskID: The task ID of the progress bar.
    """

    return progress.add_task(
        f"[pink]├── {description}",
        start=True,
        total=total,
    )


def split_window(bounds: Tuple[float, float, float, float]) -> List[float]:
    """Returns (xmin, xmax, ymin, ymax) as floats after checking ordering."""

    xmin, xmax, ymin, ymax = (float(b) for b in bounds)

    if not (xmin < xmax and ymin < ymax):
        raise DomainError(f"Invalid window {bounds}: need xmin < xmax and ymin < ymax.")

    return [xmin, xmax, ymin, ymax]
