import numpy as np


class GradfieldError(Exception):
    """Base class for all errors raised by gradfield."""


class DomainError(GradfieldError, ValueError):
    """Raised when an input is non-finite or outside the domain of an operation."""


class DuplicateLocationError(DomainError):
    """Raised when two locations coincide within the kernel tolerance.

    Attributes:
        pair (tuple): Indices of the offending locations.
    """

    def __init__(self, i: int, j: int, tolerance: float):
        self.pair = (i, j)
        super().__init__(
            f"Locations {i} and {j} coincide within {tolerance:g} spatial units."
        )


class FactorizationError(GradfieldError, np.linalg.LinAlgError):
    """Raised when a Cholesky factorization fails after ridge escalation."""


class InitializationError(GradfieldError):
    """Raised when the posterior is not finite at the sampler's starting point."""


class NonIdentifiableError(GradfieldError):
    """Raised when the minimum contrast fit carries no information on the decay."""


class CompositionError(GradfieldError):
    """Raised when too many composition draws fail to factorize."""
