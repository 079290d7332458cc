"""Multinomial logistic-normal dynamic linear models.

Collapsed MAP estimation of the latent log-ratios, posterior draws by
collapse-uncollapse with a Dirichlet bootstrap over eta, and exact forward
filtering / backward sampling of states and covariance.
"""

__version__ = "0.1.0"

from .compositional import alr, alr_inverse, alr_to_clr, clr, clr_to_alr, closure
from .filter import FilterError, filter, log_prior_eta
from .model import (CountDataset, HyperPrior, ModelSpec, ValidationError, builtin_local_trend,
                    builtin_random_walk, validate)
from .objective import CollapsedObjective, evaluate, multinomial_loglik
from .optimize import OptimizationResult, OptimizerConfig, map_estimate
from .samplers import (DMDBConfig, PosteriorDraws, cu_pipeline, dmdb_sample_eta,
                       effective_sample_size, gibbs_chain, gibbs_w_update, mdb_sample_eta)
from .simulator import SimConfig, simulate
from .smoother import sample_inverse_wishart, sample_matrix_normal, smooth_draw

__all__ = [
    "alr", "alr_inverse", "alr_to_clr", "clr", "clr_to_alr", "closure",
    "FilterError", "filter", "log_prior_eta",
    "CountDataset", "HyperPrior", "ModelSpec", "ValidationError",
    "builtin_local_trend", "builtin_random_walk", "validate",
    "CollapsedObjective", "evaluate", "multinomial_loglik",
    "OptimizationResult", "OptimizerConfig", "map_estimate",
    "DMDBConfig", "PosteriorDraws", "cu_pipeline", "dmdb_sample_eta",
    "effective_sample_size", "gibbs_chain", "gibbs_w_update", "mdb_sample_eta",
    "SimConfig", "simulate",
    "sample_inverse_wishart", "sample_matrix_normal", "smooth_draw",
]
