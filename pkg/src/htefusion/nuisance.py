"""Nuisance-function estimation.

All nuisance surfaces (propensity scores, outcome means, residual
variances) are fitted as additive natural cubic spline regressions with
a small ridge penalty: penalized least squares for identity links and
penalized IRLS for the logistic link.  The fits are deterministic given
the data and settings; refitting reproduces coefficients bit for bit.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit

from .errors import NumericalError, ValidationError
from .model import (
    BasisSpec,
    Dataset,
    PsiVector,
    StructuralModel,
    constant_term,
    linear_term,
    pseudo_outcomes,
    spline_term,
)

__all__ = [
    "build_spline_basis",
    "AdditiveRegressor",
    "KnownFunction",
    "Propensity",
    "OutcomeMean",
    "CellMeans",
    "VarianceFunction",
    "NuisanceSet",
    "fit_additive",
    "fit_propensity",
    "fit_conditional_outcomes",
    "fit_outcome_mean",
    "fit_variance_function",
]


def build_spline_basis(data: Dataset, knots_per_covariate: int = 4, degree: int = 3) -> BasisSpec:
    """Additive spline basis over all covariates of a dataset.

    Each covariate contributes its linear term plus ``knots_per_covariate``
    nonlinear pieces with interior knots at equally spaced quantiles and
    boundary knots at the observed minimum and maximum, for a total of
    ``1 + d * (knots_per_covariate + 1)`` columns.  With zero knots the
    basis degenerates to intercept plus linear terms.  A constant
    covariate keeps only its linear term and a warning is recorded.
    """
    if knots_per_covariate < 0:
        raise ValidationError("knots_per_covariate must be >= 0")
    if degree not in (1, 3):
        raise ValidationError("spline degree must be 1 or 3")
    terms = [constant_term()]
    for j in range(data.d):
        col = data.x[:, j]
        lo, hi = float(col.min()), float(col.max())
        if lo == hi:
            warnings.warn(
                f"covariate {j + 1} is constant; keeping only its linear term",
                stacklevel=2,
            )
            terms.append(linear_term(j))
            continue
        terms.append(linear_term(j))
        if knots_per_covariate == 0:
            continue
        qs = np.arange(1, knots_per_covariate + 1) / (knots_per_covariate + 1)
        interior = np.quantile(col, qs)
        knots = np.unique(np.concatenate([[lo], interior, [hi]]))
        if knots.size < 3:
            warnings.warn(
                f"covariate {j + 1} has too few distinct values for spline terms",
                stacklevel=2,
            )
            continue
        if knots.size - 2 < knots_per_covariate:
            warnings.warn(
                f"covariate {j + 1}: tied quantiles reduced its spline terms "
                f"to {knots.size - 2}",
                stacklevel=2,
            )
        for piece in range(knots.size - 2):
            terms.append(spline_term(j, knots, piece, degree))
    return BasisSpec(tuple(terms))


def _solve_penalized(design: np.ndarray, target: np.ndarray, ridge: float,
                     weights: np.ndarray | None = None) -> np.ndarray:
    """Ridge-penalized (weighted) least squares via the normal equations.

    The penalty is ``ridge`` times the mean diagonal of the Gram matrix,
    applied to every coefficient.  If the system is still numerically
    singular the penalty is escalated a hundredfold with a warning.
    """
    if weights is None:
        gram = design.T @ design
        rhs = design.T @ target
    else:
        gram = design.T @ (weights[:, None] * design)
        rhs = design.T @ (weights * target)
    scale = float(np.mean(np.diag(gram)))
    if scale <= 0.0 or not np.isfinite(scale):
        scale = 1.0
    pen = ridge * scale
    eye = np.eye(design.shape[1])
    for attempt in range(3):
        try:
            coef = np.linalg.solve(gram + pen * eye, rhs)
        except np.linalg.LinAlgError:
            coef = None
        if coef is not None and np.isfinite(coef).all():
            if attempt > 0:
                warnings.warn(
                    "singular normal equations; solved with an escalated ridge",
                    stacklevel=3,
                )
            return coef
        pen = max(pen * 100.0, 1e-10 * scale)
    raise NumericalError("normal equations remained singular despite ridge escalation")


@dataclass
class AdditiveRegressor:
    """A fitted basis-expansion regression with an identity or logit link."""

    basis: BasisSpec
    coef: np.ndarray
    link: str = "identity"
    ridge: float = 1e-6

    def linear_predictor(self, X) -> np.ndarray:
        return self.basis.design(np.asarray(X, dtype=float)) @ self.coef

    def predict(self, X) -> np.ndarray:
        eta = self.linear_predictor(X)
        if self.link == "logit":
            return expit(eta)
        return eta


def fit_additive(X, y, basis: BasisSpec, link: str = "identity", ridge: float = 1e-6,
                 max_iter: int = 100, tol: float = 1e-10) -> AdditiveRegressor:
    """Fit an additive regression by penalized LS (identity) or IRLS (logit)."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.shape[0] != y.shape[0]:
        raise ValidationError("X and y must have the same number of rows")
    design = basis.design(X)
    if link == "identity":
        coef = _solve_penalized(design, y, ridge)
        return AdditiveRegressor(basis, coef, "identity", ridge)
    if link != "logit":
        raise ValidationError(f"unknown link {link!r}")

    # IRLS with step halving on the penalized deviance.
    scale = float(np.mean(np.sum(design * design, axis=0)))
    if scale <= 0.0 or not np.isfinite(scale):
        scale = 1.0
    pen = ridge * scale

    def deviance(c):
        eta = design @ c
        # log(1 + exp(eta)) - y * eta, computed stably
        return 2.0 * float(np.sum(np.logaddexp(0.0, eta) - y * eta)) + pen * float(c @ c)

    coef = np.zeros(basis.p)
    dev = deviance(coef)
    eye = np.eye(basis.p)
    for _ in range(max_iter):
        eta = design @ coef
        prob = expit(eta)
        w = np.clip(prob * (1.0 - prob), 1e-10, None)
        z = eta + (y - prob) / w
        try:
            new = np.linalg.solve(design.T @ (w[:, None] * design) + pen * eye,
                                  design.T @ (w * z))
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"IRLS update produced a singular system: {exc}")
        step = new - coef
        t = 1.0
        for _ in range(30):
            cand = coef + t * step
            dev_new = deviance(cand)
            if np.isfinite(dev_new) and dev_new <= dev + 1e-12:
                break
            t *= 0.5
        else:
            raise NumericalError("IRLS step halving failed to reduce the deviance")
        coef = cand
        if abs(dev - dev_new) < tol * (abs(dev) + 1.0):
            return AdditiveRegressor(basis, coef, "logit", ridge)
        dev = dev_new
    raise NumericalError(
        f"IRLS did not converge in {max_iter} iterations (last deviance {dev:.6g})"
    )


class KnownFunction:
    """Adapter exposing a known nuisance surface through ``predict``."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray]):
        self.fn = fn

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        out = np.asarray(self.fn(X), dtype=float)
        return np.broadcast_to(out, (X.shape[0],)).copy()


def _predict_component(component, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if np.isscalar(component) or isinstance(component, (int, float)):
        return np.full(X.shape[0], float(component))
    return np.asarray(component.predict(X), dtype=float)


@dataclass
class Propensity:
    """Treatment propensity by source, with symmetric probability clipping."""

    by_source: dict
    clip: float = 0.01

    def predict(self, X, s) -> np.ndarray:
        return np.clip(self.predict_raw(X, s), self.clip, 1.0 - self.clip)

    def predict_raw(self, X, s) -> np.ndarray:
        """Fitted probabilities without the clip, for callers that want the
        raw inverse weights (the pooled comparator deliberately does)."""
        X = np.asarray(X, dtype=float)
        s = np.broadcast_to(np.asarray(s), (X.shape[0],))
        out = np.empty(X.shape[0])
        for src in np.unique(s):
            if int(src) not in self.by_source:
                raise ValidationError(f"no propensity component for source s={int(src)}")
            mask = s == src
            out[mask] = _predict_component(self.by_source[int(src)], X[mask])
        return out


@dataclass
class OutcomeMean:
    """Conditional mean of the pseudo-outcome by source."""

    by_source: dict

    def predict(self, X, s) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        s = np.broadcast_to(np.asarray(s), (X.shape[0],))
        out = np.empty(X.shape[0])
        for src in np.unique(s):
            if int(src) not in self.by_source:
                raise ValidationError(f"no outcome-mean component for source s={int(src)}")
            mask = s == src
            out[mask] = _predict_component(self.by_source[int(src)], X[mask])
        return out


@dataclass
class CellMeans:
    """Conditional outcome means fitted separately in each (a, s) cell."""

    by_cell: dict

    def predict(self, a: int, s: int, X) -> np.ndarray:
        key = (int(a), int(s))
        if key not in self.by_cell:
            raise ValidationError(f"no conditional-outcome fit for cell (a={a}, s={s})")
        return _predict_component(self.by_cell[key], np.asarray(X, dtype=float))


@dataclass
class VarianceFunction:
    """Residual variance by (a, s) cell, clamped to fixed bounds."""

    by_cell: dict
    bounds: tuple

    def predict(self, a, X, s) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        a = np.broadcast_to(np.asarray(a), (X.shape[0],))
        s = np.broadcast_to(np.asarray(s), (X.shape[0],))
        out = np.empty(X.shape[0])
        for key in np.unique(np.stack([a, s], axis=1), axis=0):
            cell = (int(key[0]), int(key[1]))
            if cell not in self.by_cell:
                raise ValidationError(f"no variance fit for cell (a={cell[0]}, s={cell[1]})")
            mask = (a == key[0]) & (s == key[1])
            out[mask] = _predict_component(self.by_cell[cell], X[mask])
        return np.clip(out, self.bounds[0], self.bounds[1])


class _SmearedLogVariance:
    """exp of a log-scale fit times a smearing factor, evaluated lazily."""

    def __init__(self, reg: AdditiveRegressor, smear: float):
        self.reg = reg
        self.smear = float(smear)

    def predict(self, X) -> np.ndarray:
        return np.exp(self.reg.predict(X)) * self.smear


@dataclass
class NuisanceSet:
    """All fitted nuisance components needed by the estimating equations."""

    e: Propensity
    mu: OutcomeMean
    sigma2: VarianceFunction
    cond_y: CellMeans | None = None


def _require_both_arms(data: Dataset, source: int, context: str):
    mask = data.s == source
    arms = np.unique(data.a[mask])
    if arms.size < 2:
        raise ValidationError(
            f"{context}: source s={source} contains a single treatment arm"
        )


def fit_propensity(data: Dataset, spec: BasisSpec, trial_known: float | None = None,
                   clip: float = 0.01, ridge: float = 1e-6) -> Propensity:
    """Fit per-source logistic propensities on the spline basis.

    ``trial_known`` short-circuits the trial fit with a known constant
    randomization probability.  Each fitted source must contain both
    treatment arms; otherwise the logistic fit is hopeless (separation)
    and a validation error is raised.
    """
    if not 0.0 < clip < 0.5:
        raise ValidationError("clip must lie in (0, 0.5)")
    by_source = {}
    for source in (0, 1):
        mask = data.s == source
        if not mask.any():
            continue
        if source == 1 and trial_known is not None:
            if not 0.0 < trial_known < 1.0:
                raise ValidationError("trial_known must lie in (0, 1)")
            by_source[1] = float(trial_known)
            continue
        _require_both_arms(data, source, "propensity fit")
        by_source[source] = fit_additive(
            data.x[mask], data.a[mask].astype(float), spec, link="logit", ridge=ridge
        )
    if not by_source:
        raise ValidationError("propensity fit: dataset has no usable source")
    return Propensity(by_source, clip=clip)


def fit_conditional_outcomes(data: Dataset, spec: BasisSpec, ridge: float = 1e-6) -> CellMeans:
    """Regress the raw outcome on the spline basis within each (a, s) cell."""
    by_cell = {}
    for s_val in (0, 1):
        for a_val in (0, 1):
            mask = (data.s == s_val) & (data.a == a_val)
            if not mask.any():
                continue
            by_cell[(a_val, s_val)] = fit_additive(
                data.x[mask], data.y[mask], spec, link="identity", ridge=ridge
            )
    if not by_cell:
        raise ValidationError("conditional-outcome fit: no non-empty cells")
    return CellMeans(by_cell)


def fit_outcome_mean(data: Dataset, model: StructuralModel, psi_pre: PsiVector,
                     e_fit: Propensity, spec: BasisSpec, ridge: float = 1e-6) -> OutcomeMean:
    """Regress the pseudo-outcome at the preliminary fit on X per source."""
    e_hat = e_fit.predict(data.x, data.s)
    h = pseudo_outcomes(model, psi_pre, data, e_hat)
    by_source = {}
    for source in (0, 1):
        mask = data.s == source
        if not mask.any():
            continue
        by_source[source] = fit_additive(
            data.x[mask], h[mask], spec, link="identity", ridge=ridge
        )
    return OutcomeMean(by_source)


def fit_variance_function(data: Dataset, model: StructuralModel, psi_pre: PsiVector,
                          e_fit: Propensity, mu_fit: OutcomeMean, spec: BasisSpec,
                          ridge: float = 1e-6,
                          rel_bounds: tuple = (1e-4, 1e4)) -> VarianceFunction:
    """Fit the residual variance surface per (a, s) cell.

    Squared centered pseudo-outcomes are regressed on the log scale and
    mapped back with the cell's empirical smearing factor, so that a
    homoscedastic truth is recovered without retransformation bias.
    Predictions are clamped to ``rel_bounds`` times the pooled outcome
    variance.
    """
    e_hat = e_fit.predict(data.x, data.s)
    h = pseudo_outcomes(model, psi_pre, data, e_hat)
    resid = h - mu_fit.predict(data.x, data.s)
    y_var = float(np.var(data.y))
    if y_var <= 0.0:
        y_var = 1.0
    bounds = (rel_bounds[0] * y_var, rel_bounds[1] * y_var)
    by_cell = {}
    for s_val in (0, 1):
        for a_val in (0, 1):
            mask = (data.s == s_val) & (data.a == a_val)
            if not mask.any():
                continue
            r2 = resid[mask] ** 2
            floor = 1e-12 * (float(r2.mean()) + 1e-300)
            z = np.log(r2 + floor)
            reg = fit_additive(data.x[mask], z, spec, link="identity", ridge=ridge)
            smear = float(np.mean(np.exp(z - reg.predict(data.x[mask]))))
            by_cell[(a_val, s_val)] = _SmearedLogVariance(reg, smear)
    if not by_cell:
        raise ValidationError("variance fit: no non-empty cells")
    return VarianceFunction(by_cell, bounds)
