"""Margin-free odds-ratio sensitivity analysis for principal causal effects."""

__version__ = "0.1.0"

from .strata import (MarginPair, SensitivitySpec, StrataProbs, cell_partials,
                     cell_probs, compute_delta, d_e11_dp)
from .nuisance import (Dataset, FoldPlan, LearnerSpec, NuisanceFit,
                       NuisanceSpecs, crossfit_nuisances, fit_nuisances,
                       make_folds)
from .estimators import (EstimateReport, mu_cdr, mu_dml, mu_or, mu_wt,
                         psi_terms, score_components, strata_proportion)
from .analysis import AnalysisOptions, estimate, sweep_theta
from .simulation import (DgpConfig, FittedTheta, SimScenario, gen_dataset,
                         run_scenario, summarize, true_mu)
from .transforms import transform_covariates

__all__ = [
    "AnalysisOptions", "Dataset", "DgpConfig", "EstimateReport", "FittedTheta",
    "FoldPlan", "LearnerSpec", "MarginPair", "NuisanceFit", "NuisanceSpecs",
    "SensitivitySpec", "SimScenario", "StrataProbs", "cell_partials",
    "cell_probs", "compute_delta", "crossfit_nuisances", "d_e11_dp",
    "estimate", "fit_nuisances", "gen_dataset", "make_folds", "mu_cdr",
    "mu_dml", "mu_or", "mu_wt", "psi_terms", "run_scenario",
    "score_components", "strata_proportion", "summarize", "sweep_theta",
    "transform_covariates", "true_mu",
]
