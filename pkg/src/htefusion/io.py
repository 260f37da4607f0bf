"""CSV ingestion, analysis configuration, and the result document."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ._version import __version__
from .errors import ValidationError
from .estimators import FitOptions, run_pipeline
from .inference import ate_estimate, gof_test, sandwich_covariance, tau_curve
from .model import (
    BasisSpec,
    Dataset,
    StructuralModel,
    constant_term,
    linear_term,
    product_term,
    square_term,
)
from .simulation import McSummary, SimConfig, run_monte_carlo

__all__ = [
    "AnalysisConfig",
    "ResultDocument",
    "parse_terms",
    "load_csv",
    "run_fit",
    "run_simulate",
]


def parse_terms(exprs, names) -> BasisSpec:
    """Turn term expressions into a basis over named covariates.

    Supported forms: ``1`` (constant), ``name`` (linear), ``name^2``
    (square), ``nameA*nameB`` (product).
    """
    index = {nm: i for i, nm in enumerate(names)}
    terms = []
    for raw in exprs:
        expr = str(raw).strip()
        if not expr:
            raise ValidationError("empty basis term expression")
        if expr == "1":
            terms.append(constant_term())
            continue
        if "*" in expr:
            left, _, right = expr.partition("*")
            left, right = left.strip(), right.strip()
            if left not in index or right not in index:
                raise ValidationError(f"unknown covariate in term {expr!r}")
            terms.append(product_term(index[left], index[right]))
            continue
        if expr.endswith("^2"):
            nm = expr[:-2].strip()
            if nm not in index:
                raise ValidationError(f"unknown covariate in term {expr!r}")
            terms.append(square_term(index[nm]))
            continue
        if expr in index:
            terms.append(linear_term(index[expr]))
            continue
        raise ValidationError(f"cannot parse basis term {expr!r}")
    return BasisSpec(tuple(terms))


@dataclass(frozen=True)
class AnalysisConfig:
    """Everything needed to run one fit on a CSV file."""

    data: str
    covariates: tuple
    tau_terms: tuple
    lambda_terms: tuple
    source_col: str = "s"
    treatment_col: str = "a"
    outcome_col: str = "y"
    estimators: tuple = ("integrative",)
    knots: int = 4
    ridge: float = 1e-6
    clip_e: float = 0.01
    trial_known: float | None = None
    probes: tuple = ()
    gof_tau_terms: tuple = ()
    gof_lambda_terms: tuple = ()
    gof_efficient_weight: bool = False
    output: str | None = None
    curve_output: str | None = None

    def __post_init__(self):
        for name in ("covariates", "tau_terms", "lambda_terms", "estimators",
                     "gof_tau_terms", "gof_lambda_terms"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        object.__setattr__(self, "probes",
                           tuple(tuple(float(v) for v in row) for row in self.probes))
        if not self.covariates:
            raise ValidationError("config must list at least one covariate column")
        if not self.tau_terms:
            raise ValidationError("config must define the effect basis (tau_terms)")
        if not self.lambda_terms:
            raise ValidationError(
                "config must define at least one confounding basis term (lambda_terms)"
            )
        unknown = set(self.estimators) - {"integrative", "rct", "meta"}
        if unknown:
            raise ValidationError(f"unknown estimators: {sorted(unknown)}")
        for row in self.probes:
            if len(row) != len(self.covariates):
                raise ValidationError(
                    "each probe must list one value per covariate "
                    f"({len(self.covariates)} expected, got {len(row)})"
                )

    @classmethod
    def from_dict(cls, raw: dict) -> "AnalysisConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        missing = {"data", "covariates", "tau_terms", "lambda_terms"} - set(raw)
        if missing:
            raise ValidationError(f"config is missing required keys: {sorted(missing)}")
        return cls(**raw)

    @classmethod
    def from_file(cls, path: str) -> "AnalysisConfig":
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ValidationError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config file {path} is not valid JSON: {exc}")
        if not isinstance(raw, dict):
            raise ValidationError("config file must hold a JSON object")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return _plain(asdict(self))


def _plain(obj):
    """Recursively convert numpy scalars/arrays and tuples to JSON types."""
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def _parse_binary(token: str, line: int, col: str) -> int:
    try:
        val = float(token)
    except ValueError:
        raise ValidationError(f"line {line}, column {col!r}: {token!r} is not a number")
    if val not in (0.0, 1.0):
        raise ValidationError(f"line {line}, column {col!r}: expected 0 or 1, got {token!r}")
    return int(val)


def _parse_float(token: str, line: int, col: str) -> float:
    try:
        val = float(token)
    except ValueError:
        raise ValidationError(f"line {line}, column {col!r}: {token!r} is not a number")
    if not np.isfinite(val):
        raise ValidationError(f"line {line}, column {col!r}: value is not finite")
    return val


def load_csv(path: str, cfg: AnalysisConfig) -> Dataset:
    """Read a combined-sample CSV, validating every cell it uses."""
    try:
        fh = open(path, newline="")
    except FileNotFoundError:
        raise ValidationError(f"data file not found: {path}")
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValidationError(f"data file {path} is empty")
        have = set(reader.fieldnames)
        needed = [cfg.source_col, cfg.treatment_col, cfg.outcome_col, *cfg.covariates]
        missing = [c for c in needed if c not in have]
        if missing:
            raise ValidationError(f"data file {path} is missing columns: {missing}")
        s, a, y, x = [], [], [], []
        for i, row in enumerate(reader):
            line = i + 2  # header is line 1
            s.append(_parse_binary(row[cfg.source_col], line, cfg.source_col))
            a.append(_parse_binary(row[cfg.treatment_col], line, cfg.treatment_col))
            y.append(_parse_float(row[cfg.outcome_col], line, cfg.outcome_col))
            x.append([_parse_float(row[c], line, c) for c in cfg.covariates])
    if not s:
        raise ValidationError(f"data file {path} contains no data rows")
    return Dataset(s, a, y, np.array(x))


@dataclass(frozen=True)
class ResultDocument:
    """Losslessly serializable record of one fit."""

    version: str
    config: dict
    results: dict
    diagnostics: dict

    def to_dict(self) -> dict:
        return {"version": self.version, "config": self.config,
                "results": self.results, "diagnostics": self.diagnostics}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict) -> "ResultDocument":
        missing = {"version", "config", "results", "diagnostics"} - set(raw)
        if missing:
            raise ValidationError(f"result document is missing keys: {sorted(missing)}")
        return cls(raw["version"], raw["config"], raw["results"], raw["diagnostics"])

    @classmethod
    def from_json(cls, text: str) -> "ResultDocument":
        return cls.from_dict(json.loads(text))


def _coef_block(labels, values, ses) -> list:
    from .inference import _Z95

    block = []
    for lab, val, se in zip(labels, values, ses):
        block.append({
            "term": lab,
            "estimate": float(val),
            "se": float(se),
            "lower": float(val - _Z95 * se),
            "upper": float(val + _Z95 * se),
        })
    return block


def run_fit(cfg: AnalysisConfig, data: Dataset | None = None) -> ResultDocument:
    """Load the data (unless provided), run the cascade, assemble results."""
    if data is None:
        data = load_csv(cfg.data, cfg)
    if data.d != len(cfg.covariates):
        raise ValidationError(
            f"data has {data.d} covariates but config names {len(cfg.covariates)}"
        )
    names = list(cfg.covariates)
    model = StructuralModel(parse_terms(cfg.tau_terms, names),
                            parse_terms(cfg.lambda_terms, names))
    opts = FitOptions(knots=cfg.knots, ridge=cfg.ridge, clip_e=cfg.clip_e,
                      trial_known=cfg.trial_known)
    results: dict = {}
    diagnostics: dict = {"n_trial": data.n_trial, "n_obs": data.n_obs}
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        fit = run_pipeline(data, model, opts, which=cfg.estimators)

        if fit.integrative is not None:
            rep = fit.integrative
            est = sandwich_covariance(data, model, rep.psi_hat, fit.nuisances)
            block = {
                "tau": _coef_block(model.tau_basis.labels(names), est.psi_hat.phi,
                                   est.se[:model.p1]),
                "lambda": _coef_block(model.lambda_basis.labels(names),
                                      est.psi_hat.lam, est.se[model.p1:]),
            }
            ate = ate_estimate(data, model, est)
            block["ate"] = {"estimate": ate.tau0_hat, "se": ate.se,
                            "lower": ate.lower, "upper": ate.upper,
                            "pi0": ate.pi0_hat}
            if cfg.probes:
                curve = tau_curve(model, est, np.array(cfg.probes))
                block["curve"] = [
                    {"x": _plain(curve.grid[i]), "estimate": float(curve.estimate[i]),
                     "se": float(curve.se[i]), "lower": float(curve.lower[i]),
                     "upper": float(curve.upper[i])}
                    for i in range(curve.grid.shape[0])
                ]
            if cfg.gof_tau_terms or cfg.gof_lambda_terms:
                gof = gof_test(data, model, est, fit.nuisances,
                               parse_terms(cfg.gof_tau_terms, names),
                               parse_terms(cfg.gof_lambda_terms, names),
                               efficient_weight=cfg.gof_efficient_weight)
                block["gof"] = {"t_stat": gof.t_stat, "df": gof.df,
                                "p_value": gof.p_value}
            results["integrative"] = block
            diagnostics["integrative"] = {
                "iterations": rep.iterations,
                "final_score_norm": rep.final_score_norm,
                "converged": rep.converged,
                "fallback_used": rep.fallback_used,
            }

        if fit.rct is not None:
            rep = fit.rct
            est = sandwich_covariance(data, model, rep.psi_hat, fit.rct_nuisances,
                                      trial_only=True)
            block = {"tau": _coef_block(model.tau_basis.labels(names),
                                        est.psi_hat.phi, est.se)}
            if data.n_obs > 0:
                ate = ate_estimate(data, model, est)
                block["ate"] = {"estimate": ate.tau0_hat, "se": ate.se,
                                "lower": ate.lower, "upper": ate.upper,
                                "pi0": ate.pi0_hat}
            if cfg.probes:
                curve = tau_curve(model, est, np.array(cfg.probes))
                block["curve"] = [
                    {"x": _plain(curve.grid[i]), "estimate": float(curve.estimate[i]),
                     "se": float(curve.se[i]), "lower": float(curve.lower[i]),
                     "upper": float(curve.upper[i])}
                    for i in range(curve.grid.shape[0])
                ]
            results["rct"] = block
            diagnostics["rct"] = {
                "iterations": rep.iterations,
                "final_score_norm": rep.final_score_norm,
                "converged": rep.converged,
                "fallback_used": rep.fallback_used,
            }

        if fit.meta_coef is not None:
            block = {"tau_coefficients": {
                lab: float(v) for lab, v in zip(model.tau_basis.labels(names),
                                                fit.meta_coef)
            }}
            if data.n_obs > 0:
                obs_tau = model.tau(fit.meta_coef, data.x[data.s == 0])
                block["ate"] = {"estimate": float(obs_tau.mean())}
            results["meta"] = block

    diagnostics["warnings"] = sorted({str(w.message) for w in caught})
    doc = ResultDocument(__version__, cfg.to_dict(), _plain(results),
                         _plain(diagnostics))
    if cfg.output:
        with open(cfg.output, "w") as fh:
            fh.write(doc.to_json() + "\n")
    if cfg.curve_output and "integrative" in results and "curve" in results["integrative"]:
        with open(cfg.curve_output, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([*names, "estimate", "se", "lower", "upper"])
            for row in results["integrative"]["curve"]:
                writer.writerow([*row["x"], row["estimate"], row["se"],
                                 row["lower"], row["upper"]])
    return doc


def run_simulate(cfg: SimConfig, out: str | None = None) -> McSummary:
    """Run a Monte Carlo study and optionally write its JSON summary."""
    mc = run_monte_carlo(cfg)
    if out:
        with open(out, "w") as fh:
            json.dump(mc.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    return mc
