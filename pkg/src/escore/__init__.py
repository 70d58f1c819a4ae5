"""Collaborative doubly robust estimation of treatment effects.

The package fits a propensity score, reduces its dimension through the
e-score (the propensity averaged over the outcome model's residual-bias
function), and targets the outcome regression so that plug-in estimates of
counterfactual means solve the relevant score equations. Alongside the
estimators it ships an exact finite-support oracle for the underlying
double-robustness identities and a Monte Carlo lab for the synthetic study.
"""

__version__ = "0.1.0"

from .estimators import (
    ESTIMATOR_IDS,
    EstimateReport,
    TargetSpec,
    aipw,
    estimate,
    etmle_al,
    gcomp,
    tmle,
)
from .numkit import GlmFit, KernelSpec, OutcomeScaler
from .nuisance import Dataset, NuisanceFit, NuisanceSpec, fit_all
from .oracle import (
    DiscreteLaw,
    OracleFns,
    check_lemma1_exact,
    check_theorem1,
    check_theorem2,
    drift_term,
    efficiency_bound,
    escore_chain,
    if0_variance,
    oracle_fns,
    random_law,
    reduced_propensity,
    run_identity_suite,
    true_theta,
)
from .simlab import (
    SCENARIOS,
    MetricsTable,
    ScenarioSpec,
    SimConfig,
    generate,
    mc_efficiency_bound,
    run_campaign,
)

__all__ = [
    "__version__",
    "ESTIMATOR_IDS",
    "EstimateReport",
    "TargetSpec",
    "aipw",
    "estimate",
    "etmle_al",
    "gcomp",
    "tmle",
    "GlmFit",
    "KernelSpec",
    "OutcomeScaler",
    "Dataset",
    "NuisanceFit",
    "NuisanceSpec",
    "fit_all",
    "DiscreteLaw",
    "OracleFns",
    "check_lemma1_exact",
    "check_theorem1",
    "check_theorem2",
    "drift_term",
    "efficiency_bound",
    "escore_chain",
    "if0_variance",
    "oracle_fns",
    "random_law",
    "reduced_propensity",
    "run_identity_suite",
    "true_theta",
    "SCENARIOS",
    "MetricsTable",
    "ScenarioSpec",
    "SimConfig",
    "generate",
    "mc_efficiency_bound",
    "run_campaign",
]
