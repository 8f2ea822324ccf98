__version__ = "0.1.0"

from .gradient import composition_sample, conditional_gradient_distribution  # noqa: F401, E402
from .grid import GridSpec, SurfaceGrid  # noqa: F401, E402
from .kernel import MaternParams, UnitVector, joint_cov_matrix, local_cov_block  # noqa: F401, E402
from .lgcp import PointPattern, fit_lgcp, minimum_contrast_fit  # noqa: F401, E402
from .model import Dataset, McmcConfig, PosteriorChain, PriorSpec, ThetaSample, fit_mcmc  # noqa: F401, E402
from .processes import (  # noqa: F401, E402
    angle_density,
    discrepancy_surface,
    joint_ratio_cdf,
    lds_ratio,
    sensitivity_surface,
)
