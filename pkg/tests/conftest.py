"""Shared builders for the test suite.

Most tests run on small synthetic draws from the same data-generating
process as the built-in study, either with library-fitted nuisances or
with the known truth injected through the adapter types.
"""

import numpy as np
import pytest
from scipy.special import expit

from htefusion import (
    Dataset,
    KnownFunction,
    NuisanceSet,
    OutcomeMean,
    Propensity,
    SimConfig,
    VarianceFunction,
    generate_replicate,
)


def make_config(beta=0.0, **kw):
    """SimConfig with a scalar beta broadcast to all five covariates."""
    return SimConfig(beta=(float(beta),) * 5, **kw)


@pytest.fixture(scope="session")
def desk_data():
    """One replicate at the study's desk-scale sample sizes."""
    return generate_replicate(make_config(beta=1.0, seed=3), 0)


@pytest.fixture(scope="session")
def clean_data():
    """One replicate without unmeasured confounding."""
    return generate_replicate(make_config(beta=0.0, seed=3), 0)


def true_nuisances(cfg: SimConfig) -> NuisanceSet:
    """The generator's own nuisance surfaces wrapped for the equations.

    The pseudo-outcome at the true coefficients has conditional mean
    sum(x) on trial records and sum(x) + lam(x) * (e(x) - 1/2) on
    observational ones, for either arm, so the outcome-mean surface
    below is exact.
    """
    beta = np.asarray(cfg.beta, dtype=float)
    scale = 1.0 if cfg.confounding_form == "unit" else 2.0

    def e_obs(X):
        return expit(-X.sum(axis=1))

    def mu_trial(X):
        return X.sum(axis=1)

    def mu_obs(X):
        lam = scale * (X @ beta)
        return X.sum(axis=1) + lam * (e_obs(X) - 0.5)

    e = Propensity({1: 0.5, 0: KnownFunction(e_obs)}, clip=1e-12)
    mu = OutcomeMean({1: KnownFunction(mu_trial), 0: KnownFunction(mu_obs)})
    sigma2 = VarianceFunction(
        {(a, s): 1.0 if s == 1 else 2.0 for a in (0, 1) for s in (0, 1)},
        bounds=(1e-8, 1e8),
    )
    return NuisanceSet(e, mu, sigma2, cond_y=None)


def true_psi(cfg: SimConfig):
    """Coefficients of the generating curves on the default bases."""
    from htefusion import PsiVector
    from htefusion.simulation import true_tau_coefficients

    phi = true_tau_coefficients(cfg.tau_form)
    scale = 1.0 if cfg.confounding_form == "unit" else 2.0
    lam = scale * np.asarray(cfg.beta, dtype=float)
    return PsiVector(phi, lam)


def toy_dataset(seed=0, n=40, d=3, trial_frac=0.5):
    """Small generic dataset with both sources and both arms present."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, d))
    s = (rng.random(n) < trial_frac).astype(int)
    a = (rng.random(n) < 0.5).astype(int)
    # force full (a, s) cell coverage
    s[:4] = [1, 1, 0, 0]
    a[:4] = [0, 1, 0, 1]
    y = rng.standard_normal(n) + x[:, 0] + a * (1.0 + x[:, 1])
    return Dataset(s, a, y, x)
