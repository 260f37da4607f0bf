"""Sandwich covariance, effect summaries, precision gain, and the test."""

import numpy as np
import pytest
from scipy import stats

from htefusion import (
    BasisSpec,
    FitOptions,
    NumericalError,
    PsiVector,
    StructuralModel,
    ValidationError,
    ate_estimate,
    build_workspace,
    constant_term,
    generate_replicate,
    gof_test,
    linear_term,
    mean_score_jacobian,
    precision_gain,
    product_term,
    run_pipeline,
    sandwich_covariance,
    score_matrix,
    solve_integrative,
    solve_rct,
    square_term,
    tau_curve,
)
from conftest import make_config, true_nuisances, true_psi


@pytest.fixture(scope="module")
def solved():
    cfg = make_config(beta=1.0, n=500, m=1500, seed=13)
    data = generate_replicate(cfg, 0)
    model = cfg.model()
    nuis = true_nuisances(cfg)
    rep = solve_integrative(data, model, nuis, true_psi(cfg))
    est = sandwich_covariance(data, model, rep.psi_hat, nuis)
    return cfg, data, model, nuis, rep, est


class TestSandwich:
    def test_matches_direct_formula(self, solved):
        cfg, data, model, nuis, rep, est = solved
        ws = build_workspace(data, model, nuis)
        scores = score_matrix(ws, rep.psi_hat.stacked)
        bread = mean_score_jacobian(ws)
        meat = scores.T @ scores / ws.n
        binv = np.linalg.inv(bread)
        want = binv @ meat @ binv.T / ws.n
        want = (want + want.T) / 2.0
        assert np.allclose(est.cov, want, rtol=1e-10)
        assert np.allclose(est.meat, meat)
        assert np.allclose(est.bread, bread)

    def test_shape_and_positive_definiteness(self, solved):
        cfg, data, model, nuis, rep, est = solved
        assert est.cov.shape == (model.p, model.p)
        assert np.allclose(est.cov, est.cov.T)
        assert np.linalg.eigvalsh(est.cov).min() > 0.0
        assert est.n == data.n
        assert np.allclose(est.se, np.sqrt(np.diag(est.cov)))
        assert est.phi_cov.shape == (model.p1, model.p1)

    def test_trial_only_equals_trial_subset(self, solved):
        cfg, data, model, nuis, rep, est = solved
        rct = solve_rct(data, model, nuis, true_psi(cfg).phi)
        full = sandwich_covariance(data, model, rct.psi_hat, nuis, trial_only=True)
        sub = sandwich_covariance(data.trial_only(), model, rct.psi_hat, nuis,
                                  trial_only=True)
        assert np.allclose(full.cov, sub.cov)

    def test_dimension_check(self, solved):
        cfg, data, model, nuis, rep, est = solved
        with pytest.raises(ValidationError):
            sandwich_covariance(data, model, PsiVector([1.0], [0.0]), nuis)

    def test_singular_bread_raises(self, solved):
        cfg, data, model, nuis, rep, est = solved
        dup = StructuralModel(
            BasisSpec((constant_term(), linear_term(0), linear_term(0),
                       square_term(0), linear_term(1))),
            model.lambda_basis,
        )
        psi = PsiVector(np.zeros(5), np.zeros(model.p2))
        with pytest.raises(NumericalError, match="singular"):
            sandwich_covariance(data, dup, psi, nuis)


class TestTauCurve:
    def test_pointwise_bands(self, solved):
        cfg, data, model, nuis, rep, est = solved
        grid = np.zeros((3, 5))
        grid[:, 0] = [-1.0, 0.0, 1.0]
        curve = tau_curve(model, est, grid)
        want = model.tau(rep.psi_hat.phi, grid)
        assert np.allclose(curve.estimate, want)
        design = model.tau_basis.design(grid)
        want_se = np.sqrt(np.diag(design @ est.phi_cov @ design.T))
        assert np.allclose(curve.se, want_se)
        assert np.all(curve.lower < curve.estimate)
        assert np.all(curve.upper > curve.estimate)

    def test_single_point_input(self, solved):
        cfg, data, model, nuis, rep, est = solved
        curve = tau_curve(model, est, np.zeros(5))
        assert curve.estimate.shape == (1,)


class TestAteEstimate:
    def test_matches_manual_decomposition(self, solved):
        cfg, data, model, nuis, rep, est = solved
        ate = ate_estimate(data, model, est)
        obs_x = data.x[data.s == 0]
        vals = model.tau(rep.psi_hat.phi, obs_x)
        assert ate.tau0_hat == pytest.approx(vals.mean())
        grad = model.tau_basis.design(obs_x).mean(axis=0)
        pi0 = obs_x.shape[0] / data.n
        want_var = vals.var(ddof=1) / (pi0 * data.n) + grad @ est.phi_cov @ grad
        assert ate.se == pytest.approx(np.sqrt(want_var))
        assert ate.pi0_hat == pytest.approx(pi0)
        assert ate.lower < ate.tau0_hat < ate.upper

    def test_needs_observational_records(self, solved):
        cfg, data, model, nuis, rep, est = solved
        with pytest.raises(ValidationError):
            ate_estimate(data.trial_only(), model, est)


class TestPrecisionGain:
    def test_identical_fits_give_zero(self, solved):
        cfg, data, model, nuis, rep, est = solved
        out = precision_gain(est, est)
        assert np.allclose(out.gain, 0.0)
        assert out.min_eigenvalue == pytest.approx(0.0, abs=1e-12)

    def test_pooling_tightens_effect_estimates(self, solved):
        cfg, data, model, nuis, rep, est = solved
        rct = solve_rct(data, model, nuis, true_psi(cfg).phi)
        est_r = sandwich_covariance(data, model, rct.psi_hat, nuis, trial_only=True)
        out = precision_gain(est, est_r)
        # the population gain is positive semidefinite; on one replicate we
        # only insist the total gain is clearly positive, any negative
        # eigenvalue is small next to the dominant one, and the estimated
        # effect curve has smaller variance at representative points
        assert np.trace(out.gain) > 0.0
        eigs = np.linalg.eigvalsh(out.gain)
        assert out.min_eigenvalue > -0.05 * eigs.max()
        assert np.allclose(out.gain,
                           out.precision_integrative - out.precision_rct)
        probe = np.zeros((3, 5))
        probe[:, 0] = [-1.5, 0.0, 1.5]
        design = model.tau_basis.design(probe)
        var_i = np.diag(design @ est.phi_cov @ design.T)
        var_r = np.diag(design @ est_r.phi_cov @ design.T)
        assert np.all(var_i < var_r)

    def test_equal_bases_cancel_exactly(self):
        # when the two working bases coincide, the trial block of the
        # pooled sandwich reduces to the trial-only sandwich identically
        shared = BasisSpec((constant_term(), linear_term(0), square_term(0),
                            linear_term(1), square_term(1)))
        cfg = make_config(beta=0.0, lambda_terms=shared, seed=17)
        opts = FitOptions(knots=0, trial_known=0.5)
        for rep_idx in range(3):
            data = generate_replicate(cfg, rep_idx)
            model = cfg.model()
            fit = run_pipeline(data, model, opts, which=("integrative", "rct"))
            est_i = sandwich_covariance(data, model, fit.integrative.psi_hat,
                                        fit.nuisances)
            est_r = sandwich_covariance(data, model, fit.rct.psi_hat,
                                        fit.rct_nuisances, trial_only=True)
            out = precision_gain(est_i, est_r)
            assert np.abs(out.gain).max() < 1e-10

    def test_dimension_mismatch(self, solved):
        cfg, data, model, nuis, rep, est = solved
        small = StructuralModel(BasisSpec((constant_term(),)),
                                BasisSpec((linear_term(0),)))
        rep2 = solve_rct(data, small, nuis, np.zeros(1))
        est2 = sandwich_covariance(data, small, rep2.psi_hat, nuis, trial_only=True)
        with pytest.raises(ValidationError):
            precision_gain(est, est2)


class TestGofTest:
    def test_needs_alternative_terms(self, solved):
        cfg, data, model, nuis, rep, est = solved
        with pytest.raises(ValidationError):
            gof_test(data, model, est, nuis, BasisSpec(()), BasisSpec(()))

    def test_degrees_of_freedom_and_p_value(self, solved):
        cfg, data, model, nuis, rep, est = solved
        out = gof_test(data, model, est, nuis,
                       BasisSpec((product_term(0, 1),)),
                       BasisSpec((square_term(0), square_term(1))))
        assert out.df == 3
        assert 0.0 <= out.p_value <= 1.0
        assert out.p_value == pytest.approx(stats.chi2.sf(out.t_stat, 3))
        assert out.t_stat >= 0.0

    def test_efficient_weight_variant_runs(self, solved):
        cfg, data, model, nuis, rep, est = solved
        out = gof_test(data, model, est, nuis, BasisSpec((product_term(0, 1),)),
                       BasisSpec(()), efficient_weight=True)
        assert np.isfinite(out.t_stat) and out.df == 1

    def test_detects_a_grossly_omitted_term(self):
        cfg = make_config(beta=0.0, n=2000, m=8000, seed=19,
                          tau_terms=BasisSpec((constant_term(), linear_term(0),
                                               square_term(0), linear_term(1))))
        data = generate_replicate(cfg, 0)
        model = cfg.model()
        opts = FitOptions(knots=0, trial_known=0.5)
        fit = run_pipeline(data, model, opts)
        est = sandwich_covariance(data, model, fit.integrative.psi_hat,
                                  fit.nuisances)
        out = gof_test(data, model, est, fit.nuisances,
                       BasisSpec((square_term(1),)), BasisSpec(()))
        assert out.p_value < 1e-4

    def test_clean_model_is_not_rejected_wildly(self, solved):
        cfg, data, model, nuis, rep, est = solved
        out = gof_test(data, model, est, nuis, BasisSpec((product_term(0, 1),)),
                       BasisSpec((square_term(0),)))
        assert out.t_stat < stats.chi2.ppf(0.9999, out.df)
