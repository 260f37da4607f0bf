"""Point estimators for the effect and confounding coefficients.

Three routes are provided:

* the integrative estimator, which solves the weighted estimating
  equations that pool the trial with the observational sample while
  modeling the residual confounding of the latter;
* a trial-only estimator using the same machinery restricted to the
  randomized records and the effect block;
* a pooled inverse-propensity comparator that ignores confounding,
  kept as a benchmark.

The estimating function for one record is

    score_i = grad_i * k_i * eps_i,

where ``grad_i`` stacks the effect-basis row with the confounding-basis
row (the latter zeroed on trial records), ``eps_i`` is the centered
pseudo-outcome, and ``k_i = (a_i - r_i) * w_i`` with ``w_i`` the inverse
residual variance of the record's own arm and ``r_i`` the variance-
weighted conditional mean of treatment given covariates and source.  By
construction ``k_i`` has conditional mean zero, which makes the
equations insensitive to the outcome-mean plug-in.  Because ``eps_i``
is linear in the coefficients, the damped Newton solve below typically
converges in one step.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .errors import NumericalError, ValidationError
from .model import BasisSpec, Dataset, PsiVector, StructuralModel, constant_term
from .nuisance import (
    CellMeans,
    NuisanceSet,
    Propensity,
    build_spline_basis,
    fit_conditional_outcomes,
    fit_outcome_mean,
    fit_propensity,
    fit_variance_function,
)

__all__ = [
    "FitOptions",
    "SolveReport",
    "ScoreWorkspace",
    "build_workspace",
    "efficient_score",
    "score_jacobian",
    "mean_score",
    "mean_score_jacobian",
    "score_matrix",
    "preliminary_estimate",
    "solve_integrative",
    "solve_rct",
    "meta_estimate",
    "fit_nuisances",
    "PipelineResult",
    "run_pipeline",
]


@dataclass(frozen=True)
class FitOptions:
    """Settings shared by the nuisance fits and the equation solver.

    ``var_knots`` controls the basis of the log-variance regressions.
    ``None``, the default, fits one constant per (arm, source) cell:
    the variance enters only through inverse weights, and fitting a
    covariate-dependent surface on a few hundred records per cell puts
    enough noise into the weights to visibly deflate the variance
    estimator.  Pass an integer to use a spline basis with that many
    interior knots instead (0 gives intercept plus linear terms).
    """

    knots: int = 4
    degree: int = 3
    var_knots: int | None = None
    ridge: float = 1e-6
    clip_e: float = 0.01
    sigma2_rel_bounds: tuple = (1e-4, 1e4)
    trial_known: float | None = None
    tol_rel: float = 1e-10
    max_iter: int = 50
    max_halvings: int = 30
    jac_ridge_rel: float = 1e-8
    step_tol: float = 1e-12
    refine: int = 1


@dataclass(frozen=True)
class SolveReport:
    """Outcome of a Newton solve of the estimating equations."""

    psi_hat: PsiVector
    iterations: int
    final_score_norm: float
    converged: bool
    fallback_used: bool


@dataclass(frozen=True)
class ScoreWorkspace:
    """Cached per-record pieces of the estimating function.

    ``base_resid - resid_design @ psi`` gives the centered pseudo-outcome
    at any coefficient vector, so scores and their exact Jacobian come
    from the cached matrices without refitting anything.
    """

    grad: np.ndarray          # (n, p) stacked basis gradients
    resid_design: np.ndarray  # (n, p) coefficient design of the residual
    base_resid: np.ndarray    # (n,) outcome minus outcome-mean plug-in
    score_weight: np.ndarray  # (n,) k_i, conditionally mean-zero weight
    eps_a: np.ndarray         # (n,) treatment minus propensity
    p1: int
    p2: int

    @property
    def n(self) -> int:
        return self.base_resid.shape[0]

    @property
    def p(self) -> int:
        return self.p1 + self.p2


def build_workspace(data: Dataset, model: StructuralModel, nuis: NuisanceSet,
                    trial_only: bool = False) -> ScoreWorkspace:
    """Evaluate nuisances once and cache every score ingredient.

    With ``trial_only`` the workspace is restricted to randomized records
    and to the effect block; the result is identical whether or not
    observational records are present in ``data``.
    """
    if trial_only:
        if data.n_trial == 0:
            raise ValidationError("trial-only workspace requires s=1 records")
        data = data.trial_only()
    e = nuis.e.predict(data.x, data.s)
    mu = nuis.mu.predict(data.x, data.s)
    v1 = nuis.sigma2.predict(1, data.x, data.s)
    v0 = nuis.sigma2.predict(0, data.x, data.s)
    a = data.a.astype(float)
    own_w = np.where(data.a == 1, 1.0 / v1, 1.0 / v0)
    weighted_a = (e / v1) / (e / v1 + (1.0 - e) / v0)
    k = (a - weighted_a) * own_w
    t_design = model.tau_basis.design(data.x)
    if trial_only:
        grad = t_design
        resid_design = a[:, None] * t_design
        p2 = 0
    else:
        l_design = model.lambda_basis.design(data.x)
        obs = (1.0 - data.s)[:, None]
        grad = np.hstack([t_design, obs * l_design])
        resid_design = np.hstack(
            [a[:, None] * t_design, obs * (a - e)[:, None] * l_design]
        )
        p2 = model.p2
    base_resid = data.y - mu
    for name, arr in (("propensity", e), ("outcome mean", mu),
                      ("variance", v1), ("variance", v0)):
        if not np.isfinite(arr).all():
            raise NumericalError(f"non-finite {name} predictions in the workspace")
    return ScoreWorkspace(grad, resid_design, base_resid, k, a - e, model.p1, p2)


def residuals(ws: ScoreWorkspace, params: np.ndarray) -> np.ndarray:
    return ws.base_resid - ws.resid_design @ params


def score_matrix(ws: ScoreWorkspace, params: np.ndarray) -> np.ndarray:
    """All per-record scores at once, shape (n, p)."""
    return ws.grad * (ws.score_weight * residuals(ws, params))[:, None]


def mean_score(ws: ScoreWorkspace, params: np.ndarray) -> np.ndarray:
    return score_matrix(ws, params).mean(axis=0)


def mean_score_jacobian(ws: ScoreWorkspace) -> np.ndarray:
    """Average derivative of the score in the coefficients (constant)."""
    return -(ws.grad * ws.score_weight[:, None]).T @ ws.resid_design / ws.n


def efficient_score(ws: ScoreWorkspace, params: np.ndarray, i: int) -> np.ndarray:
    """Score contribution of record ``i`` at the given coefficients."""
    eps = ws.base_resid[i] - ws.resid_design[i] @ params
    return ws.grad[i] * (ws.score_weight[i] * eps)

def score_jacobian(ws: ScoreWorkspace, params: np.ndarray, i: int) -> np.ndarray:
    """Derivative of record ``i``'s score in the coefficients.

    The residual is linear in the coefficients, so this does not depend
    on ``params``; the argument is kept for signature symmetry.
    """
    return -ws.score_weight[i] * np.outer(ws.grad[i], ws.resid_design[i])


def _plain_lstsq(design: np.ndarray, target: np.ndarray, what: str) -> np.ndarray:
    gram = design.T @ design
    rhs = design.T @ target
    try:
        coef = np.linalg.solve(gram, rhs)
        if np.isfinite(coef).all():
            return coef
    except np.linalg.LinAlgError:
        pass
    warnings.warn(f"{what}: singular design, solved with a small ridge", stacklevel=3)
    scale = float(np.mean(np.diag(gram))) or 1.0
    return np.linalg.solve(gram + 1e-8 * scale * np.eye(design.shape[1]), rhs)


def preliminary_estimate(data: Dataset, model: StructuralModel, cond_y: CellMeans) -> PsiVector:
    """Least-squares starting values from cell-mean differences.

    The effect coefficients regress the trial arm-mean difference on the
    effect basis over trial records; the confounding coefficients then
    regress the observational arm-mean difference minus the fitted
    effect curve on the confounding basis over observational records.
    With exact cell means and representable curves both steps are exact.
    """
    trial = data.s == 1
    if not trial.any():
        raise ValidationError("preliminary estimate requires trial records")
    xt = data.x[trial]
    delta_trial = cond_y.predict(1, 1, xt) - cond_y.predict(0, 1, xt)
    phi = _plain_lstsq(model.tau_basis.design(xt), delta_trial, "preliminary effect fit")
    obs = data.s == 0
    if not obs.any():
        return PsiVector(phi, np.zeros(model.p2))
    xo = data.x[obs]
    delta_obs = cond_y.predict(1, 0, xo) - cond_y.predict(0, 0, xo)
    resid = delta_obs - model.tau(phi, xo)
    lam = _plain_lstsq(model.lambda_basis.design(xo), resid, "preliminary confounding fit")
    return PsiVector(phi, lam)


def _newton_solve(ws: ScoreWorkspace, init: np.ndarray, opts: FitOptions):
    """Damped Newton iteration on the mean score; returns a raw report."""
    current = init.copy()
    f = mean_score(ws, current)
    if not np.isfinite(f).all():
        raise NumericalError("mean score is not finite at the starting values")
    norm = float(np.linalg.norm(f))
    if norm == 0.0:
        return current, 0, 0.0, True, False
    tol = opts.tol_rel * norm
    jac = mean_score_jacobian(ws)
    jac_scale = float(np.linalg.norm(jac))
    for it in range(1, opts.max_iter + 1):
        try:
            step = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError:
            step = None
        if step is None or not np.isfinite(step).all():
            ridge = opts.jac_ridge_rel * (jac_scale if jac_scale > 0 else 1.0)
            try:
                step = np.linalg.solve(jac + ridge * np.eye(ws.p), -f)
            except np.linalg.LinAlgError:
                return init.copy(), it, norm, False, True
            if not np.isfinite(step).all():
                return init.copy(), it, norm, False, True
        scale_t = 1.0
        improved = False
        for _ in range(opts.max_halvings + 1):
            cand = current + scale_t * step
            f_new = mean_score(ws, cand)
            norm_new = float(np.linalg.norm(f_new))
            if np.isfinite(norm_new) and norm_new < norm:
                improved = True
                break
            scale_t *= 0.5
        if not improved:
            return init.copy(), it, norm, False, True
        step_size = float(np.linalg.norm(scale_t * step))
        current, f, norm = cand, f_new, norm_new
        if norm <= tol:
            return current, it, norm, True, False
        if step_size <= opts.step_tol * (1.0 + float(np.linalg.norm(current))):
            break
    return init.copy(), opts.max_iter, norm, False, True


def solve_integrative(data: Dataset, model: StructuralModel, nuis: NuisanceSet,
                      psi_init: PsiVector, opts: FitOptions = FitOptions()) -> SolveReport:
    """Solve the pooled estimating equations for all coefficients."""
    if data.n_trial == 0 or data.n_obs == 0:
        raise ValidationError("integrative fitting needs records from both sources")
    for source in (0, 1):
        mask = data.s == source
        if np.unique(data.a[mask]).size < 2:
            raise ValidationError(
                f"integrative fitting: source s={source} contains a single arm"
            )
    ws = build_workspace(data, model, nuis)
    init = psi_init.stacked
    if init.size != ws.p:
        raise ValidationError("starting values do not match the model dimension")
    params, its, norm, converged, fallback = _newton_solve(ws, init, opts)
    return SolveReport(PsiVector.from_stacked(params, model.p1), its, norm,
                       converged, fallback)


def solve_rct(data: Dataset, model: StructuralModel, nuis: NuisanceSet,
              phi_init: np.ndarray, opts: FitOptions = FitOptions()) -> SolveReport:
    """Solve the trial-only equations for the effect coefficients."""
    ws = build_workspace(data, model, nuis, trial_only=True)
    init = np.asarray(phi_init, dtype=float)
    if init.size != model.p1:
        raise ValidationError("starting values do not match the effect dimension")
    params, its, norm, converged, fallback = _newton_solve(ws, init, opts)
    return SolveReport(PsiVector(params, np.zeros(0)), its, norm, converged, fallback)


def meta_estimate(data: Dataset, model: StructuralModel, e_fit: Propensity) -> np.ndarray:
    """Pooled inverse-propensity comparator for the effect coefficients.

    Regresses ``a*y/e - (1-a)*y/(1-e)`` on the effect basis over the
    combined sample.  No confounding adjustment: with a confounded
    observational source this is biased by construction.  Uses the raw
    fitted probabilities rather than the clipped ones; the instability
    of plain inverse weighting near extreme propensities is part of
    what the benchmark is meant to show.
    """
    e = e_fit.predict_raw(data.x, data.s)
    if np.any(e <= 0.0) or np.any(e >= 1.0):
        raise NumericalError("meta comparator: fitted propensities reached 0 or 1")
    a = data.a.astype(float)
    adj = a * data.y / e - (1.0 - a) * data.y / (1.0 - e)
    return _plain_lstsq(model.tau_basis.design(data.x), adj, "meta comparator fit")


def _variance_spec(data: Dataset, spec: BasisSpec, opts: FitOptions) -> BasisSpec:
    if opts.var_knots is None:
        return BasisSpec((constant_term(),))
    if opts.var_knots == opts.knots:
        return spec
    return build_spline_basis(data, opts.var_knots, opts.degree)


def _outcome_nuisances_at(data: Dataset, model: StructuralModel, psi: PsiVector,
                          e_fit, cond_y, spec, opts: FitOptions) -> NuisanceSet:
    """Refit the coefficient-dependent nuisances (mu, sigma2) at ``psi``."""
    mu_fit = fit_outcome_mean(data, model, psi, e_fit, spec, ridge=opts.ridge)
    var_fit = fit_variance_function(data, model, psi, e_fit, mu_fit,
                                    _variance_spec(data, spec, opts),
                                    ridge=opts.ridge, rel_bounds=opts.sigma2_rel_bounds)
    return NuisanceSet(e_fit, mu_fit, var_fit, cond_y)


def fit_nuisances(data: Dataset, model: StructuralModel,
                  opts: FitOptions = FitOptions()):
    """Run the nuisance cascade; returns the set and the starting values.

    Order: propensities, per-cell outcome means, preliminary coefficients,
    pseudo-outcome means per source, residual variances per cell.
    """
    spec = build_spline_basis(data, opts.knots, opts.degree)
    e_fit = fit_propensity(data, spec, trial_known=opts.trial_known,
                           clip=opts.clip_e, ridge=opts.ridge)
    cond_y = fit_conditional_outcomes(data, spec, ridge=opts.ridge)
    psi_pre = preliminary_estimate(data, model, cond_y)
    nuis = _outcome_nuisances_at(data, model, psi_pre, e_fit, cond_y, spec, opts)
    return nuis, psi_pre


@dataclass
class PipelineResult:
    """Everything produced by one pass of the estimation cascade.

    ``nuisances`` is the set the integrative solve ended on (the base set
    when no integrative fit was requested); ``rct_nuisances`` is the
    trial estimator's own refined set, which never sees the pooled
    coefficient path.
    """

    nuisances: NuisanceSet
    psi_pre: PsiVector
    integrative: SolveReport | None = None
    rct: SolveReport | None = None
    meta_coef: np.ndarray | None = None
    rct_nuisances: NuisanceSet | None = None


def run_pipeline(data: Dataset, model: StructuralModel, opts: FitOptions = FitOptions(),
                 which: tuple = ("integrative",)) -> PipelineResult:
    """Fit nuisances, then the requested estimators.

    The preliminary coefficients are noisy, and the outcome-mean and
    variance surfaces fitted at them leak that noise into the final
    solve as a small shrinkage toward zero.  ``opts.refine`` extra
    rounds (default one) refit mu and sigma2 at the solved coefficients
    and re-solve, which removes most of the leakage at desk-scale
    sample sizes.  Each estimator refines along its own coefficient
    path: the trial-only fit never sees pooled coefficients.
    """
    unknown = set(which) - {"integrative", "rct", "meta"}
    if unknown:
        raise ValidationError(f"unknown estimators requested: {sorted(unknown)}")
    spec = build_spline_basis(data, opts.knots, opts.degree)
    e_fit = fit_propensity(data, spec, trial_known=opts.trial_known,
                           clip=opts.clip_e, ridge=opts.ridge)
    cond_y = fit_conditional_outcomes(data, spec, ridge=opts.ridge)
    psi_pre = preliminary_estimate(data, model, cond_y)
    base = _outcome_nuisances_at(data, model, psi_pre, e_fit, cond_y, spec, opts)
    result = PipelineResult(base, psi_pre)
    if "integrative" in which:
        nuis = base
        rep = solve_integrative(data, model, nuis, psi_pre, opts)
        for _ in range(max(0, opts.refine)):
            if rep.fallback_used:
                break
            nuis = _outcome_nuisances_at(data, model, rep.psi_hat,
                                         e_fit, cond_y, spec, opts)
            rep = solve_integrative(data, model, nuis, rep.psi_hat, opts)
        result.integrative = rep
        result.nuisances = nuis
    if "rct" in which:
        rnuis = base
        rep = solve_rct(data, model, rnuis, psi_pre.phi, opts)
        for _ in range(max(0, opts.refine)):
            if rep.fallback_used:
                break
            rnuis = _outcome_nuisances_at(data, model,
                                          PsiVector(rep.psi_hat.phi, psi_pre.lam),
                                          e_fit, cond_y, spec, opts)
            rep = solve_rct(data, model, rnuis, rep.psi_hat.phi, opts)
        result.rct = rep
        result.rct_nuisances = rnuis
    if "meta" in which:
        result.meta_coef = meta_estimate(data, model, e_fit)
    return result
