import numpy as np
import pytest

from logsae.ml_fit import fit_ml, wls_beta
from logsae.model_core import AreaFrame, PopulationLayout
from logsae.predictors import (
    best_predict_area, best_predict_unit, eb1_predict, eb2_predict, linear_weights, predict_all,
)

from oracles import bp_coefficients, eb1_coefficients


def test_unit_predictor_matches_linear_form(small_layout):
    L, th, beta = small_layout, (0.3, 0.6), np.array([0.5, -0.2])
    for d, a in enumerate(L.areas):
        for i in range(a.X_r.shape[0]):
            b, c = bp_coefficients(L, th, beta, d, i)
            up = best_predict_unit(beta, th, a, i)
            assert up.w_tilde == pytest.approx(np.exp(b @ L.y_s + c), rel=1e-13)


def test_sigma_u2_zero_lognormal_mean(small_layout):
    beta = np.array([0.5, -0.2])
    a = small_layout.areas[0]
    for i in range(a.X_r.shape[0]):
        w = best_predict_unit(beta, (0.0, 0.8), a, i).w_tilde
        assert w == pytest.approx(np.exp(a.X_r[i] @ beta + 0.4), rel=1e-12)


def test_area_mean_identity(small_layout):
    beta, th = np.array([0.5, -0.2]), (0.3, 0.6)
    p = predict_all(beta, th, small_layout)
    for a, ap, wt in zip(small_layout.areas, p.areas, p.w_tilde):
        direct = (np.exp(a.y_s).sum() + wt.sum()) / a.N_d
        assert ap.tau_hat == pytest.approx(direct, rel=1e-14)
        other = best_predict_area(beta, th, a, np.exp(a.y_s))
        assert other.tau_hat == pytest.approx(ap.tau_hat, rel=1e-14)


def test_fully_observed_area_is_sample_mean():
    X = np.column_stack([np.ones(4), np.arange(4.0)])
    areas = [AreaFrame(0, X, np.zeros((0, 2)), np.log([1.0, 2.0, 3.0, 4.0])),
             AreaFrame(1, X[:2], X[2:], np.log([2.0, 5.0]))]
    p = predict_all([0.1, 0.2], (0.3, 0.4), PopulationLayout(areas))
    assert p.areas[0].tau_hat == pytest.approx(2.5, rel=1e-15)
    assert p.w_tilde[0].size == 0


def test_linear_weights_dense(small_layout):
    L, th = small_layout, (0.3, 0.6)
    for d, a in enumerate(L.areas):
        for i in range(a.X_r.shape[0]):
            b, _ = eb1_coefficients(L, th, d, i)
            np.testing.assert_allclose(linear_weights(th, L, d, a.X_r[i]), b, rtol=1e-9, atol=1e-12)
            np.testing.assert_allclose(b @ L.X, a.X_r[i], atol=1e-10)  # unbiasedness


def test_eb1_uses_wls(small_layout):
    th = (0.3, 0.6)
    p = eb1_predict(th, small_layout)
    np.testing.assert_allclose(p.beta, wls_beta(th, small_layout, small_layout.y_s))
    d = 1
    a = small_layout.areas[d]
    b, c = eb1_coefficients(small_layout, th, d, 0)
    assert p.w_tilde[d][0] == pytest.approx(np.exp(b @ small_layout.y_s + c), rel=1e-10)
    assert p.stage == "EB1"


def test_eb2_and_alpha_modes(desk_layout):
    fit = fit_ml(desk_layout)
    full = eb2_predict(fit, desk_layout)
    low = predict_all(fit.beta_hat, fit.theta_hat, desk_layout, alpha_mode="no_sigma_e")
    ratio = low.w_tilde[0] / full.w_tilde[0]
    np.testing.assert_allclose(ratio, np.exp(-fit.theta_hat.sigma_e2 / 2), rtol=1e-13)
    with pytest.raises(ValueError):
        predict_all(fit.beta_hat, fit.theta_hat, desk_layout, alpha_mode="bogus")


def test_unit_iteration_and_bounds(small_layout):
    p = predict_all([0.5, -0.2], (0.3, 0.6), small_layout)
    units = list(p.units(small_layout))
    assert len(units) == sum(a.X_r.shape[0] for a in small_layout.areas)
    with pytest.raises(IndexError):
        best_predict_unit([0.5, -0.2], (0.3, 0.6), small_layout.areas[0], 10**6)
