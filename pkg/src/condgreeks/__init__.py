"""Conditional Greeks for Euler-discretised SDEs.

Conditional expectations E[l(X) | g(X) = 0] are estimated with Malliavin
weights; their parameter derivatives use single-run weak (measure-valued)
derivatives of the Gaussian Euler kernels, with a score-function baseline.
"""

__version__ = "0.1.0"

from .black_scholes import BsConfig, bs_functionals, bs_model, bs_oracle_price, bs_oracle_vega
from .conditional import ConditionalProblem, RatioEstimate, estimate_L, kernel_baseline_L
from .errors import (
    CondGreeksError,
    ConfigError,
    ContractError,
    DecompositionError,
    DegenerateConstraintError,
    DegenerateKernelError,
    IllConditionedError,
    PropertyFailure,
    SingularTangentError,
)
from .greeks import GreekResult, SgdTrace, conditional_greek, quotient_rule, sgd_minimize
from .score import score_gradient
from .sde import EulerPath, ModelSpec, RngStream, TimeGrid, build_grid, simulate_path
from .stats import EstimatorStats, JointStats
from .weak_derivative import BranchLaw, hj_decompose, sample_branch, single_run_gradient

__all__ = [
    "BranchLaw", "BsConfig", "CondGreeksError", "ConditionalProblem", "ConfigError", "ContractError",
    "DecompositionError", "DegenerateConstraintError", "DegenerateKernelError", "EstimatorStats",
    "EulerPath", "GreekResult", "IllConditionedError", "JointStats", "ModelSpec", "PropertyFailure",
    "RatioEstimate", "RngStream", "SgdTrace", "SingularTangentError", "TimeGrid", "bs_functionals",
    "bs_model", "bs_oracle_price", "bs_oracle_vega", "build_grid", "conditional_greek", "estimate_L",
    "hj_decompose", "kernel_baseline_L", "quotient_rule", "sample_branch", "score_gradient",
    "sgd_minimize", "simulate_path", "single_run_gradient",
]
