"""Linear regression with a finite categorical random slope coefficient.

Identification recovers the moments of the random slope from cross
moments of the data, inverts them into support points and probabilities,
and a two-step iterated GMM delivers estimates with asymptotically valid
standard errors.  A Monte Carlo engine reproduces the finite-sample
evidence for the estimator.
"""

from .catdist import forward_moments, hankel_det, invert_general, invert_k2
from .core import (
    CategoricalDistribution,
    CollinearRegressorsError,
    DegenerateSupportError,
    EstimationError,
    HomogeneityError,
    InfeasibleJointError,
    InfeasibleMomentsError,
    MomentOverflowError,
    MomentSet,
    NonConvergenceError,
    NonRealSupportError,
    NoVariationError,
    PhiEstimate,
    RankDeficiencyError,
    ReducedRankError,
    RegressionSample,
    SingularDesignError,
    binomial,
    sample_moment,
)
from .gmm import (
    GmmEstimate,
    GmmOptions,
    MomentsGmmEstimate,
    MomentStack,
    estimate,
    estimate_moments,
    moment_vector,
    variance_estimate,
    weighting_matrix,
)
from .mcsim import DgpSpec, EstimatorConfig, McReport, generate, run_study
from .momsolve import RhoTable, build_rho_table, kappa_squared, solve_moments
from .multivar import (
    JointDistribution2x2,
    MonomialBasis,
    MultiMomentSet,
    joint_2x2,
    lambda_matrix,
    marginal_distribution,
    monomial_basis,
    solve_moments_multi,
)
from .ols import detilde, estimate_phi

__version__ = "0.1.0"

__all__ = [
    "CategoricalDistribution",
    "CollinearRegressorsError",
    "DegenerateSupportError",
    "DgpSpec",
    "EstimatorConfig",
    "EstimationError",
    "GmmEstimate",
    "HomogeneityError",
    "InfeasibleJointError",
    "InfeasibleMomentsError",
    "MomentOverflowError",
    "NonConvergenceError",
    "NonRealSupportError",
    "NoVariationError",
    "RankDeficiencyError",
    "ReducedRankError",
    "SingularDesignError",
    "GmmOptions",
    "JointDistribution2x2",
    "McReport",
    "MomentSet",
    "MomentStack",
    "MomentsGmmEstimate",
    "MonomialBasis",
    "MultiMomentSet",
    "PhiEstimate",
    "RegressionSample",
    "RhoTable",
    "binomial",
    "build_rho_table",
    "detilde",
    "estimate",
    "estimate_moments",
    "estimate_phi",
    "forward_moments",
    "generate",
    "hankel_det",
    "invert_general",
    "invert_k2",
    "joint_2x2",
    "kappa_squared",
    "lambda_matrix",
    "marginal_distribution",
    "moment_vector",
    "monomial_basis",
    "run_study",
    "sample_moment",
    "solve_moments",
    "solve_moments_multi",
    "variance_estimate",
    "weighting_matrix",
]
