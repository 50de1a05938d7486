"""History-restricted marginal structural models for availability-constrained panels."""
from .errors import *  # noqa: F401,F403
from .estimator import (
    CONTRAST_PRESETS,
    VCOV_NAMES,
    Contrast,
    FitResult,
    availability_conditional_fit,
    contrast_vector,
    estimating_function,
    fit_ipw,
    jacobian,
    sandwich_vcov,
    solve_beta,
    wald,
)
from .mr import CrossFitPlan, MRFit, NuisanceSet, NuisanceSpec, fit_nuisances, psi, solve_mr
from .msm import Design, Feature, HSpec, WorkingModel, build_design, dose_model, mean_and_gradient, saturated_model
from .panel import Panel, PositivityReport, TrajectoryRecord, ingest, validate_positivity
from .regimes import (
    ExpandedTable,
    RegimeAtom,
    RegimeSequence,
    RegimeSet,
    compliance,
    enumerate_regimes,
    expand_panel,
    intended_treatment,
    ip_weight,
)
from .simulate import (
    ReplicateReport,
    SimScenario,
    TruthReport,
    feedback_macro_difference,
    feedback_true_beta,
    run_replicates,
    simulate_panel,
    true_beta,
)

__version__ = "0.1.0"
