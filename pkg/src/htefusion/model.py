"""Core data containers and the structural effect model.

A combined sample holds records from two sources: a randomized trial
(``s = 1``) and an observational cohort (``s = 0``).  Treatment-effect
heterogeneity is modeled as ``tau(x) = phi' b_tau(x)`` and the residual
confounding of the observational source as ``lam(x) = lam' b_lam(x)``,
where ``b_tau`` and ``b_lam`` are user-chosen basis expansions of the
covariates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import ValidationError

__all__ = [
    "UnitRecord",
    "Dataset",
    "BasisTerm",
    "BasisSpec",
    "StructuralModel",
    "PsiVector",
    "constant_term",
    "linear_term",
    "square_term",
    "product_term",
    "spline_term",
    "pseudo_outcome",
    "pseudo_outcomes",
    "residual_eps_h",
]


def _check_binary(v, name):
    arr = np.asarray(v)
    if not np.isin(arr, (0, 1)).all():
        raise ValidationError(f"{name} must contain only 0/1 values")
    return arr.astype(np.int8)


@dataclass(frozen=True)
class UnitRecord:
    """One observation: source flag, treatment arm, outcome, covariates."""

    s: int
    a: int
    y: float
    x: np.ndarray

    def __post_init__(self):
        if self.s not in (0, 1):
            raise ValidationError(f"source flag s must be 0 or 1, got {self.s!r}")
        if self.a not in (0, 1):
            raise ValidationError(f"treatment a must be 0 or 1, got {self.a!r}")
        if not np.isfinite(self.y):
            raise ValidationError(f"outcome y must be finite, got {self.y!r}")
        x = np.asarray(self.x, dtype=float)
        if x.ndim != 1 or x.size == 0:
            raise ValidationError("covariate vector x must be 1-d and non-empty")
        if not np.isfinite(x).all():
            raise ValidationError("covariate vector x must be finite")
        object.__setattr__(self, "x", x)


class Dataset:
    """Column-oriented view of a combined trial + observational sample.

    Parameters
    ----------
    s, a : array_like
        Source flag (1 = trial, 0 = observational) and treatment arm, 0/1.
    y : array_like
        Observed outcome.
    x : array_like, shape (n, d)
        Covariate matrix; all entries must be finite.

    Source/arm coverage is intentionally not enforced here: a trial-only
    dataset is valid input for trial-only fitting.  Estimation routines
    check the coverage they actually need.
    """

    __slots__ = ("s", "a", "y", "x")

    def __init__(self, s, a, y, x):
        s = _check_binary(s, "s")
        a = _check_binary(a, "a")
        y = np.asarray(y, dtype=float)
        x = np.asarray(x, dtype=float)
        if x.ndim != 2:
            raise ValidationError(f"x must be a 2-d matrix, got ndim={x.ndim}")
        n = x.shape[0]
        if n == 0:
            raise ValidationError("dataset must contain at least one record")
        if not (s.shape == a.shape == y.shape == (n,)):
            raise ValidationError(
                f"column lengths disagree: s={s.shape}, a={a.shape}, "
                f"y={y.shape}, x rows={n}"
            )
        if not np.isfinite(y).all():
            bad = int(np.flatnonzero(~np.isfinite(y))[0])
            raise ValidationError(f"outcome y is not finite at row {bad}")
        if not np.isfinite(x).all():
            bad = np.argwhere(~np.isfinite(x))[0]
            raise ValidationError(
                f"covariate x is not finite at row {int(bad[0])}, column {int(bad[1])}"
            )
        for name, col in (("s", s), ("a", a), ("y", y), ("x", x)):
            col.flags.writeable = False
            object.__setattr__(self, name, col)

    def __setattr__(self, name, value):  # columns are read-only
        raise AttributeError("Dataset is immutable")

    @classmethod
    def from_records(cls, records: Iterable[UnitRecord]) -> "Dataset":
        recs = list(records)
        if not recs:
            raise ValidationError("dataset must contain at least one record")
        d = recs[0].x.size
        for i, r in enumerate(recs):
            if r.x.size != d:
                raise ValidationError(
                    f"record {i} has {r.x.size} covariates, expected {d}"
                )
        return cls(
            [r.s for r in recs],
            [r.a for r in recs],
            [r.y for r in recs],
            np.vstack([r.x for r in recs]),
        )

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def n_trial(self) -> int:
        return int(self.s.sum())

    @property
    def n_obs(self) -> int:
        return self.n - self.n_trial

    def __len__(self) -> int:
        return self.n

    def subset(self, mask) -> "Dataset":
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (self.n,):
            raise ValidationError("mask length must match the number of records")
        if not mask.any():
            raise ValidationError("subset would be empty")
        return Dataset(self.s[mask], self.a[mask], self.y[mask], self.x[mask])

    def trial_only(self) -> "Dataset":
        return self.subset(self.s == 1)

    def records(self) -> Iterator[UnitRecord]:
        for i in range(self.n):
            yield UnitRecord(int(self.s[i]), int(self.a[i]), float(self.y[i]), self.x[i])


def _natural_cubic_piece(v: np.ndarray, knots: Sequence[float], piece: int) -> np.ndarray:
    # Natural cubic spline beyond {1, v}: for knots t_0 < ... < t_L the
    # r-th piece is d_r(v) - d_{L-1}(v) with
    # d_j(v) = [(v - t_j)_+^3 - (v - t_L)_+^3] / (t_L - t_j),
    # linear outside [t_0, t_L] by construction.
    t = np.asarray(knots, dtype=float)
    L = t.size - 1

    def d(j):
        return (
            np.clip(v - t[j], 0.0, None) ** 3 - np.clip(v - t[L], 0.0, None) ** 3
        ) / (t[L] - t[j])

    return d(piece) - d(L - 1)


@dataclass(frozen=True)
class BasisTerm:
    """One column of a basis expansion.

    kind is one of "const", "linear", "square", "product", "spline".
    For spline terms, ``knots`` is the full (sorted) knot sequence for
    covariate ``j`` including the two boundary knots, and ``piece``
    selects one of the ``len(knots) - 2`` nonlinear pieces.  ``degree``
    3 gives a natural cubic piece; 1 gives a hinge ``(v - t)_+``.
    """

    kind: str
    j: int = 0
    k: int = 0
    knots: tuple = ()
    piece: int = 0
    degree: int = 3

    def __post_init__(self):
        if self.kind not in ("const", "linear", "square", "product", "spline"):
            raise ValidationError(f"unknown basis term kind {self.kind!r}")
        if self.kind == "spline":
            if self.degree not in (1, 3):
                raise ValidationError("spline degree must be 1 or 3")
            if len(self.knots) < 3:
                raise ValidationError("spline terms need at least 3 knots")
            if not 0 <= self.piece <= len(self.knots) - 3:
                raise ValidationError("spline piece index out of range")
            if any(b <= a for a, b in zip(self.knots, self.knots[1:])):
                raise ValidationError("spline knots must be strictly increasing")

    def column(self, X: np.ndarray) -> np.ndarray:
        if self.kind == "const":
            return np.ones(X.shape[0])
        for idx in (self.j, self.k) if self.kind == "product" else (self.j,):
            if not 0 <= idx < X.shape[1]:
                raise ValidationError(
                    f"basis term refers to covariate {idx} but x has {X.shape[1]} columns"
                )
        v = X[:, self.j]
        if self.kind == "linear":
            return v.copy()
        if self.kind == "square":
            return v * v
        if self.kind == "product":
            return v * X[:, self.k]
        if self.degree == 1:
            return np.clip(v - self.knots[self.piece + 1], 0.0, None)
        return _natural_cubic_piece(v, self.knots, self.piece)

    def label(self, names: Sequence[str] | None = None) -> str:
        def nm(idx):
            return names[idx] if names is not None else f"x{idx + 1}"

        if self.kind == "const":
            return "1"
        if self.kind == "linear":
            return nm(self.j)
        if self.kind == "square":
            return f"{nm(self.j)}^2"
        if self.kind == "product":
            return f"{nm(self.j)}*{nm(self.k)}"
        return f"ns({nm(self.j)},{self.piece + 1})"


def constant_term() -> BasisTerm:
    return BasisTerm("const")


def linear_term(j: int) -> BasisTerm:
    return BasisTerm("linear", j=j)


def square_term(j: int) -> BasisTerm:
    return BasisTerm("square", j=j)


def product_term(j: int, k: int) -> BasisTerm:
    return BasisTerm("product", j=j, k=k)


def spline_term(j: int, knots: Sequence[float], piece: int, degree: int = 3) -> BasisTerm:
    return BasisTerm("spline", j=j, knots=tuple(float(t) for t in knots), piece=piece, degree=degree)


@dataclass(frozen=True)
class BasisSpec:
    """Ordered collection of basis terms defining a design matrix."""

    terms: tuple

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        for t in self.terms:
            if not isinstance(t, BasisTerm):
                raise ValidationError("BasisSpec expects BasisTerm entries")

    @property
    def p(self) -> int:
        return len(self.terms)

    def labels(self, names: Sequence[str] | None = None) -> list:
        return [t.label(names) for t in self.terms]

    def design(self, X) -> np.ndarray:
        """Evaluate all terms on a covariate matrix, returning (n, p)."""
        X = np.asarray(X, dtype=float)
        if X.ndim != 2:
            raise ValidationError("design expects a 2-d covariate matrix")
        if self.p == 0:
            return np.empty((X.shape[0], 0))
        return np.column_stack([t.column(X) for t in self.terms])

    def row(self, x) -> np.ndarray:
        """Evaluate all terms on a single covariate vector, returning (p,)."""
        x = np.asarray(x, dtype=float)
        if x.ndim != 1:
            raise ValidationError("row expects a 1-d covariate vector")
        return self.design(x[None, :])[0]


@dataclass(frozen=True)
class PsiVector:
    """Stacked parameter vector: effect coefficients then confounding ones."""

    phi: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        for name in ("phi", "lam"):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.ndim != 1:
                raise ValidationError(f"{name} must be a 1-d coefficient vector")
            if not np.isfinite(v).all():
                raise ValidationError(f"{name} must be finite")
            v.flags.writeable = False
            object.__setattr__(self, name, v)

    @property
    def stacked(self) -> np.ndarray:
        return np.concatenate([self.phi, self.lam])

    @classmethod
    def from_stacked(cls, vec, p1: int) -> "PsiVector":
        vec = np.asarray(vec, dtype=float)
        if not 0 <= p1 <= vec.size:
            raise ValidationError("p1 out of range for stacked vector")
        return cls(vec[:p1], vec[p1:])


@dataclass(frozen=True)
class StructuralModel:
    """Parametric working models for the effect and confounding curves."""

    tau_basis: BasisSpec
    lambda_basis: BasisSpec

    def __post_init__(self):
        if self.tau_basis.p < 1:
            raise ValidationError("tau basis must have at least one term")
        if self.lambda_basis.p < 1:
            raise ValidationError("lambda basis must have at least one term")
        if self.tau_basis.terms[0].kind != "const":
            raise ValidationError("the first tau basis term must be the constant 1")

    @property
    def p1(self) -> int:
        return self.tau_basis.p

    @property
    def p2(self) -> int:
        return self.lambda_basis.p

    @property
    def p(self) -> int:
        return self.p1 + self.p2

    def _eval(self, basis: BasisSpec, coef, x):
        coef = np.asarray(coef, dtype=float)
        if coef.shape != (basis.p,):
            raise ValidationError(
                f"coefficient length {coef.shape} does not match basis size {basis.p}"
            )
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return float(basis.row(x) @ coef)
        return basis.design(x) @ coef

    def tau(self, phi, x):
        """Treatment-effect curve at one covariate vector or a matrix of them."""
        return self._eval(self.tau_basis, phi, x)

    def lam(self, lam_coef, x):
        """Confounding curve at one covariate vector or a matrix of them."""
        return self._eval(self.lambda_basis, lam_coef, x)


def pseudo_outcome(model: StructuralModel, psi: PsiVector, rec: UnitRecord, e_hat: float) -> float:
    """Outcome purged of the modeled effect and confounding terms.

    H = y - tau(x) * a - (1 - s) * lam(x) * (a - e_hat).  For a trial
    record the confounding term vanishes, so the value does not depend
    on ``e_hat`` or on the confounding coefficients.
    """
    h = rec.y - model.tau(psi.phi, rec.x) * rec.a
    if rec.s == 0:
        h -= model.lam(psi.lam, rec.x) * (rec.a - float(e_hat))
    return float(h)


def pseudo_outcomes(model: StructuralModel, psi: PsiVector, data: Dataset, e_hat) -> np.ndarray:
    """Vectorized pseudo_outcome over a dataset; e_hat aligns with records."""
    e_hat = np.broadcast_to(np.asarray(e_hat, dtype=float), (data.n,))
    tau_vals = model.tau(psi.phi, data.x)
    lam_vals = model.lam(psi.lam, data.x)
    return data.y - tau_vals * data.a - (1 - data.s) * lam_vals * (data.a - e_hat)


def residual_eps_h(
    model: StructuralModel, psi: PsiVector, rec: UnitRecord, e_hat: float, mu_hat: float
) -> float:
    """Pseudo-outcome centered at its source-specific conditional mean."""
    return pseudo_outcome(model, psi, rec, e_hat) - float(mu_hat)
