"""Likelihood-informed subspace tools for Bayesian inference with a Gaussian reference."""

__version__ = "0.1.0"

from .errors import ConfigError, ContractError, DegenerateEnsembleError, LISError, NumericalError
from .model import (
    ConstantModel,
    Elliptic1DModel,
    LinearGaussianModel,
    LogNormalObservationModel,
    TargetModel,
    TemperedModel,
    WhitenedReference,
    exact_linear_log_Z,
    exact_linear_posterior,
    linear_f_norm_ratio,
    make_elliptic_problem,
    make_linear_problem,
    make_lognormal_problem,
)
from .gram import GramEstimate, GramKind, estimate_H0_reference, estimate_H1_chain, estimate_H1_weighted
from .subspace import Subspace, leading_eigs, residual, spectrum_report, truncate_by_tail
from .marginalize import SurrogateDensity, SurrogateKind, eval_log_surrogate, eval_log_surrogate_posterior
from .samplers import MHConfig, run_adaptive_lis, run_lis_mcmc, run_smc_lis
from .diagnostics import (
    BoundReport,
    DivergenceEstimate,
    hellinger_bound_report,
    kl_bound_report,
    gaussian_hellinger_closed_form,
    hellinger_sq_self_normalized,
    kl_self_normalized,
)
