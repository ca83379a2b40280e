"""Semi-structured distributional regression.

Additive predictors per distribution parameter mixing interpretable
linear terms, penalized spline smooths, random effects and small deep
trunks, with an orthogonalization cell that keeps the structured part
identifiable. See `SemiStructuredRegression` for the estimator API and
the `sddr` command-line tool for the file-based workflow.
"""

from .design import Dataset, DesignConfig, load_dataset
from .distributions import get_family, list_families, log_score, nll, quantile
from .engine import FitConfig, FittedModel, fit
from .estimator import SemiStructuredRegression
from .formula import ModelSpec, build_spec, parse_formula
from .evalsim import Scenario, effect_rmse, generate, load_scenario, run_experiment

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "DesignConfig",
    "FitConfig",
    "FittedModel",
    "ModelSpec",
    "Scenario",
    "SemiStructuredRegression",
    "build_spec",
    "effect_rmse",
    "fit",
    "generate",
    "get_family",
    "list_families",
    "load_dataset",
    "load_scenario",
    "log_score",
    "nll",
    "parse_formula",
    "quantile",
    "run_experiment",
]
