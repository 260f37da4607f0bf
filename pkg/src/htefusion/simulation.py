"""Monte Carlo harness for the built-in synthetic study.

The generator draws a small randomized trial next to a large
observational cohort from the same covariate population.  Treatment in
the cohort follows the covariates, and an unobserved pattern-mixture
variable shifts the untreated outcome by arm, so the cohort is
confounded whenever ``beta`` is nonzero while the trial stays clean.

Replicates are reproducible and order-independent: replicate ``r`` of a
study seeded with ``seed`` uses a counter-based generator keyed by
``(seed, r)``, and results are folded in replicate order, so the output
is byte-identical for any worker count.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .errors import NumericalError, ValidationError
from .estimators import FitOptions, run_pipeline
from .inference import ate_estimate, sandwich_covariance, gof_test
from .model import (
    BasisSpec,
    Dataset,
    StructuralModel,
    constant_term,
    linear_term,
    square_term,
)

__all__ = [
    "SimConfig",
    "CellStats",
    "McSummary",
    "default_tau_basis",
    "default_lambda_basis",
    "default_probes",
    "probe_label",
    "true_tau_coefficients",
    "true_tau",
    "true_ate",
    "true_confounding",
    "replicate_rng",
    "generate_replicate",
    "run_replicate",
    "run_monte_carlo",
    "summarize",
]

N_COVARIATES = 5
_Z95 = 1.959963984540054
ESTIMATOR_NAMES = ("integrative", "rct", "meta")


def default_tau_basis() -> BasisSpec:
    """Quadratic effect basis in the first two covariates."""
    return BasisSpec((constant_term(), linear_term(0), square_term(0),
                      linear_term(1), square_term(1)))


def default_lambda_basis() -> BasisSpec:
    """Linear confounding basis in all five covariates."""
    return BasisSpec(tuple(linear_term(j) for j in range(N_COVARIATES)))


def default_probes() -> tuple:
    """Covariate probe points (x1, x2) at which the effect is tracked."""
    return ((-3.0, 0.0), (-1.5, 0.0), (1.5, 0.0), (3.0, 0.0), (0.0, 0.0),
            (0.0, -3.0), (0.0, -1.5), (0.0, 1.5), (0.0, 3.0))


def probe_label(probe) -> str:
    return f"tau({probe[0]:g},{probe[1]:g})"


@dataclass(frozen=True)
class SimConfig:
    """Settings of one Monte Carlo study.

    ``tau_form`` selects the sign pattern of the true effect surface:
    "opposed" uses 1 + x1 + x1^2 - x2 - x2^2, "aligned" flips the x2
    block positive.  ``confounding_form`` scales the confounding curve
    induced by ``beta``: "unit" gives a curve equal to x'beta, "double"
    twice that.  ``tau_terms``/``lambda_terms`` override the fitted
    working bases, e.g. to study misspecification; the data generator is
    unaffected by them.

    ``knots`` here defaults to 0 (linear nuisance surfaces) rather than
    the library-wide spline default: the study's trial cells hold only
    about 150 records each, and per-cell spline fits at that size leak
    enough overfitting noise into the weights to visibly miscalibrate
    the variance estimates.  Pass a positive count to study that.
    """

    n: int = 300
    m: int = 5000
    beta: tuple = (0.0,) * N_COVARIATES
    reps: int = 200
    seed: int = 20260815
    probes: tuple = field(default_factory=default_probes)
    estimators: tuple = ESTIMATOR_NAMES
    tau_form: str = "opposed"
    confounding_form: str = "unit"
    knots: int = 0
    trial_known: float | None = 0.5
    jobs: int = 1
    tau_terms: BasisSpec | None = None
    lambda_terms: BasisSpec | None = None
    gof_alt_tau: BasisSpec | None = None
    gof_alt_lambda: BasisSpec | None = None
    gof_efficient_weight: bool = False

    def __post_init__(self):
        if self.n < 2 or self.m < 2:
            raise ValidationError("both samples need at least two records")
        if self.reps < 1:
            raise ValidationError("reps must be at least 1")
        if len(self.beta) != N_COVARIATES:
            raise ValidationError(f"beta must have length {N_COVARIATES}")
        if self.tau_form not in ("opposed", "aligned"):
            raise ValidationError("tau_form must be 'opposed' or 'aligned'")
        if self.confounding_form not in ("unit", "double"):
            raise ValidationError("confounding_form must be 'unit' or 'double'")
        if self.jobs < 1:
            raise ValidationError("jobs must be at least 1")
        unknown = set(self.estimators) - set(ESTIMATOR_NAMES)
        if unknown:
            raise ValidationError(f"unknown estimators: {sorted(unknown)}")

    @property
    def gof_enabled(self) -> bool:
        q1 = self.gof_alt_tau.p if self.gof_alt_tau is not None else 0
        q2 = self.gof_alt_lambda.p if self.gof_alt_lambda is not None else 0
        return q1 + q2 > 0

    def model(self) -> StructuralModel:
        return StructuralModel(self.tau_terms or default_tau_basis(),
                               self.lambda_terms or default_lambda_basis())


def true_tau_coefficients(tau_form: str) -> np.ndarray:
    """Coefficients of the generating effect surface on the default basis."""
    sign = -1.0 if tau_form == "opposed" else 1.0
    return np.array([1.0, 1.0, 1.0, sign, sign])


def true_tau(cfg: SimConfig, X) -> np.ndarray:
    coef = true_tau_coefficients(cfg.tau_form)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return default_tau_basis().design(X) @ coef


def true_ate(cfg: SimConfig) -> float:
    """Population average of the generating effect surface."""
    # E[x^2] = 1 per covariate, odd moments vanish
    return 1.0 if cfg.tau_form == "opposed" else 3.0


def true_confounding(cfg: SimConfig, X) -> np.ndarray:
    """Confounding curve of the generator: x'beta, doubled if requested."""
    scale = 1.0 if cfg.confounding_form == "unit" else 2.0
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return scale * (X @ np.asarray(cfg.beta, dtype=float))


def replicate_rng(seed: int, rep: int) -> np.random.Generator:
    """Counter-based stream keyed by (seed, replicate index)."""
    if rep < 0:
        raise ValidationError("replicate index must be non-negative")
    return np.random.Generator(np.random.Philox(key=(int(seed) & (2**64 - 1)) + (int(rep) << 64)))


def generate_replicate(cfg: SimConfig, rep: int) -> Dataset:
    """Draw one combined trial + observational sample.

    Trial: covariates standard normal, treatment a fair coin, outcome
    ``a * tau(x) + sum(x) + noise``.  Cohort: treatment follows
    ``logit = -sum(x)``; an unobserved shift with mean
    ``(2a - 1) * c * x'beta`` (c = 1/2 for "unit", 1 for "double") and
    unit variance is added to the outcome, inducing the confounding
    curve of :func:`true_confounding` while keeping each arm's residual
    variance at 2.
    """
    rng = replicate_rng(cfg.seed, rep)
    beta = np.asarray(cfg.beta, dtype=float)
    half_scale = 0.5 if cfg.confounding_form == "unit" else 1.0

    x_t = rng.standard_normal((cfg.n, N_COVARIATES))
    a_t = (rng.random(cfg.n) < 0.5).astype(np.int8)
    y_t = a_t * true_tau(cfg, x_t) + x_t.sum(axis=1) + rng.standard_normal(cfg.n)

    x_o = rng.standard_normal((cfg.m, N_COVARIATES))
    a_o = (rng.random(cfg.m) < expit(-x_o.sum(axis=1))).astype(np.int8)
    u_o = rng.normal((2.0 * a_o - 1.0) * half_scale * (x_o @ beta), 1.0)
    y_o = a_o * true_tau(cfg, x_o) + x_o.sum(axis=1) + u_o + rng.standard_normal(cfg.m)

    return Dataset(
        np.concatenate([np.ones(cfg.n, dtype=np.int8), np.zeros(cfg.m, dtype=np.int8)]),
        np.concatenate([a_t, a_o]),
        np.concatenate([y_t, y_o]),
        np.vstack([x_t, x_o]),
    )


def _probe_points(cfg: SimConfig) -> np.ndarray:
    pts = np.zeros((len(cfg.probes), N_COVARIATES))
    for i, (x1, x2) in enumerate(cfg.probes):
        pts[i, 0] = x1
        pts[i, 1] = x2
    return pts


def run_replicate(cfg: SimConfig, rep: int) -> dict:
    """Generate and analyze one replicate; returns plain-type results."""
    data = generate_replicate(cfg, rep)
    model = cfg.model()
    opts = FitOptions(knots=cfg.knots, trial_known=cfg.trial_known)
    fit = run_pipeline(data, model, opts, which=cfg.estimators)
    grid = _probe_points(cfg)
    labels = [probe_label(pr) for pr in cfg.probes]
    out = {"fallback": False, "estimates": {}, "gof_p": None}

    def record(name, points, ves, ate_row):
        cells = {}
        for lab, pt, ve in zip(labels, points, ves):
            cells[lab] = (float(pt), None if ve is None else float(ve))
        cells["ate"] = ate_row
        out["estimates"][name] = cells

    if fit.integrative is not None:
        out["fallback"] |= fit.integrative.fallback_used
        est = sandwich_covariance(data, model, fit.integrative.psi_hat, fit.nuisances)
        design = model.tau_basis.design(grid)
        pts = design @ est.psi_hat.phi
        ves = np.einsum("ij,jk,ik->i", design, est.phi_cov, design)
        ate = ate_estimate(data, model, est)
        record("integrative", pts, ves, (ate.tau0_hat, ate.se ** 2))
        if cfg.gof_enabled:
            gof = gof_test(data, model, est, fit.nuisances,
                           cfg.gof_alt_tau or BasisSpec(()),
                           cfg.gof_alt_lambda or BasisSpec(()),
                           efficient_weight=cfg.gof_efficient_weight)
            out["gof_p"] = gof.p_value
    if fit.rct is not None:
        out["fallback"] |= fit.rct.fallback_used
        est = sandwich_covariance(data, model, fit.rct.psi_hat, fit.rct_nuisances,
                                  trial_only=True)
        design = model.tau_basis.design(grid)
        pts = design @ est.psi_hat.phi
        ves = np.einsum("ij,jk,ik->i", design, est.phi_cov, design)
        ate = ate_estimate(data, model, est)
        record("rct", pts, ves, (ate.tau0_hat, ate.se ** 2))
    if fit.meta_coef is not None:
        design = model.tau_basis.design(grid)
        pts = design @ fit.meta_coef
        obs_tau = model.tau(fit.meta_coef, data.x[data.s == 0])
        record("meta", pts, [None] * len(labels), (float(obs_tau.mean()), None))
    return out


@dataclass(frozen=True)
class CellStats:
    """Monte Carlo summary of one estimator at one target."""

    mc_mean: float
    mc_var: float | None
    mean_ve: float | None
    coverage: float | None

    def to_dict(self) -> dict:
        return {"mc_mean": self.mc_mean, "mc_var": self.mc_var,
                "mean_ve": self.mean_ve, "coverage": self.coverage}


@dataclass(frozen=True)
class McSummary:
    """Aggregated Monte Carlo study results."""

    reps: int
    targets: tuple        # of (label, truth)
    cells: dict           # estimator -> label -> CellStats
    n_fallback: int
    gof: dict | None
    config: dict

    def to_dict(self) -> dict:
        return {
            "reps": self.reps,
            "targets": [{"label": lab, "truth": tr} for lab, tr in self.targets],
            "cells": {
                est: {lab: st.to_dict() for lab, st in per_est.items()}
                for est, per_est in self.cells.items()
            },
            "n_fallback": self.n_fallback,
            "gof": self.gof,
            "config": self.config,
        }


def _config_echo(cfg: SimConfig) -> dict:
    echo = {
        "n": cfg.n, "m": cfg.m, "beta": list(cfg.beta), "reps": cfg.reps,
        "seed": cfg.seed, "probes": [list(p) for p in cfg.probes],
        "estimators": list(cfg.estimators), "tau_form": cfg.tau_form,
        "confounding_form": cfg.confounding_form, "knots": cfg.knots,
        "trial_known": cfg.trial_known, "jobs": cfg.jobs,
        "tau_terms": cfg.tau_terms.labels() if cfg.tau_terms else None,
        "lambda_terms": cfg.lambda_terms.labels() if cfg.lambda_terms else None,
        "gof_alt_tau": cfg.gof_alt_tau.labels() if cfg.gof_alt_tau else None,
        "gof_alt_lambda": cfg.gof_alt_lambda.labels() if cfg.gof_alt_lambda else None,
        "gof_efficient_weight": cfg.gof_efficient_weight,
    }
    return echo


def _worker(args) -> dict:
    cfg, rep = args
    return run_replicate(cfg, rep)


def run_monte_carlo(cfg: SimConfig) -> McSummary:
    """Run all replicates and fold the results in replicate order.

    Fails if more than 5% of replicates needed the solver fallback;
    below that, the count is reported in the summary.
    """
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(_worker, [(cfg, r) for r in range(cfg.reps)],
                                    chunksize=max(1, cfg.reps // (4 * cfg.jobs))))
    else:
        results = [run_replicate(cfg, r) for r in range(cfg.reps)]

    n_fallback = sum(r["fallback"] for r in results)
    if n_fallback > 0.05 * cfg.reps:
        raise NumericalError(
            f"{n_fallback} of {cfg.reps} replicates hit the solver fallback"
        )

    labels = [probe_label(pr) for pr in cfg.probes] + ["ate"]
    grid = _probe_points(cfg)
    truths = list(true_tau(cfg, grid)) + [true_ate(cfg)]
    targets = tuple((lab, float(tr)) for lab, tr in zip(labels, truths))

    cells: dict = {}
    for est in cfg.estimators:
        if est not in results[0]["estimates"]:
            continue
        per_est = {}
        for lab, truth in targets:
            pts = np.array([r["estimates"][est][lab][0] for r in results])
            ves = [r["estimates"][est][lab][1] for r in results]
            mc_mean = float(pts.mean())
            mc_var = float(pts.var(ddof=1)) if cfg.reps > 1 else None
            if any(v is None for v in ves):
                mean_ve, coverage = None, None
            else:
                ve_arr = np.array(ves, dtype=float)
                half = _Z95 * np.sqrt(ve_arr)
                mean_ve = float(ve_arr.mean())
                coverage = float(np.mean(np.abs(pts - truth) <= half))
            per_est[lab] = CellStats(mc_mean, mc_var, mean_ve, coverage)
        cells[est] = per_est

    gof = None
    if cfg.gof_enabled and "integrative" in cells:
        pvals = [r["gof_p"] for r in results]
        if all(p is not None for p in pvals):
            arr = np.array(pvals, dtype=float)
            gof = {"alpha": 0.05,
                   "rejection_rate": float(np.mean(arr < 0.05)),
                   "p_values": [float(p) for p in arr]}

    return McSummary(cfg.reps, targets, cells, int(n_fallback), gof, _config_echo(cfg))


def summarize(mc: McSummary) -> str:
    """Fixed-width report: means x100, variances x1000, coverage in %."""
    col_names = ["target", "truth", "estimator", "mean(x1e-2)", "var(x1e-3)",
                 "ve(x1e-3)", "cvg(%)"]
    rows = [col_names]
    for lab, truth in mc.targets:
        for est, per_est in mc.cells.items():
            st = per_est[lab]
            rows.append([
                lab,
                f"{truth * 100:.0f}",
                est,
                f"{st.mc_mean * 100:.1f}",
                "-" if st.mc_var is None else f"{st.mc_var * 1000:.1f}",
                "-" if st.mean_ve is None else f"{st.mean_ve * 1000:.1f}",
                "-" if st.coverage is None else f"{st.coverage * 100:.1f}",
            ])
    widths = [max(len(r[c]) for r in rows) for c in range(len(col_names))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
             for row in rows]
    if mc.gof is not None:
        lines.append(f"specification test: rejection rate "
                     f"{mc.gof['rejection_rate'] * 100:.1f}% at alpha=5%")
    lines.append(f"replicates: {mc.reps}, solver fallbacks: {mc.n_fallback}")
    return "\n".join(lines)
