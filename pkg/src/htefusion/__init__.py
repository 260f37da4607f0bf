"""Treatment-effect heterogeneity from fused trial and observational data.

The package estimates a parametric treatment-effect curve together with
a parametric confounding curve for the observational source by solving
weighted estimating equations over the combined sample, with sandwich
standard errors, an averaged-effect summary, a precision comparison
against the trial-only fit, and a score-type specification test.  A
Monte Carlo harness reproduces the built-in synthetic study.
"""

from ._version import __version__
from .errors import NumericalError, ValidationError
from .model import (
    BasisSpec,
    BasisTerm,
    Dataset,
    PsiVector,
    StructuralModel,
    UnitRecord,
    constant_term,
    linear_term,
    product_term,
    pseudo_outcome,
    pseudo_outcomes,
    residual_eps_h,
    spline_term,
    square_term,
)
from .nuisance import (
    AdditiveRegressor,
    CellMeans,
    KnownFunction,
    NuisanceSet,
    OutcomeMean,
    Propensity,
    VarianceFunction,
    build_spline_basis,
    fit_additive,
    fit_conditional_outcomes,
    fit_outcome_mean,
    fit_propensity,
    fit_variance_function,
)
from .estimators import (
    FitOptions,
    PipelineResult,
    ScoreWorkspace,
    SolveReport,
    build_workspace,
    efficient_score,
    fit_nuisances,
    mean_score,
    mean_score_jacobian,
    meta_estimate,
    preliminary_estimate,
    run_pipeline,
    score_jacobian,
    score_matrix,
    solve_integrative,
    solve_rct,
)
from .inference import (
    AteEstimate,
    GainReport,
    GofResult,
    PsiEstimate,
    TauCurve,
    ate_estimate,
    gof_test,
    precision_gain,
    sandwich_covariance,
    tau_curve,
)
from .simulation import (
    McSummary,
    SimConfig,
    default_lambda_basis,
    default_probes,
    default_tau_basis,
    generate_replicate,
    probe_label,
    replicate_rng,
    run_monte_carlo,
    run_replicate,
    summarize,
    true_ate,
    true_tau,
    true_tau_coefficients,
)
from .io import (
    AnalysisConfig,
    ResultDocument,
    load_csv,
    parse_terms,
    run_fit,
    run_simulate,
)

__all__ = [name for name in dir() if not name.startswith("_")] + ["__version__"]
