"""Controlled direct effects with a hidden mediator, estimated from proxies."""
__version__ = "0.1.0"

from .adviv import AdvIVFit, adviv_fit, default_penalty
from .dataset import DesignMatrices, RawDataset, RoleConfig, encode, load_csv, split
from .diagnostics import DiagnosticsConfig, run_all
from .estimator import (EffectEstimate, EstimatorConfig, NuisanceEstimates, estimate_pipeline,
                        final_estimate, fit_pipeline, solve_dual, solve_primal)
from .regress import ResidualizedData, fit_lasso, fit_logistic, residualize

__all__ = [
    "AdvIVFit", "adviv_fit", "default_penalty", "DesignMatrices", "RawDataset", "RoleConfig",
    "encode", "load_csv", "split", "DiagnosticsConfig", "run_all", "EffectEstimate",
    "EstimatorConfig", "NuisanceEstimates", "estimate_pipeline", "final_estimate",
    "fit_pipeline", "solve_dual", "solve_primal", "ResidualizedData", "fit_lasso",
    "fit_logistic", "residualize",
]
