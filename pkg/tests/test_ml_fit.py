import numpy as np
import pytest

from logsae.ml_fit import (
    FitOptions, NonConvergenceError, fisher_information, fit_ml, moment_start, penalized_loglik, score,
    score_bias, score_hessian_fisher, wls_beta,
)
from logsae.model_core import dense_P, dense_V

from conftest import make_layout


def _fd_grad(f, x, h=1e-6):
    g = np.zeros(2)
    for k in range(2):
        e = np.zeros(2)
        e[k] = h
        g[k] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def test_wls_matches_dense_gls(small_layout):
    L, th = small_layout, (0.3, 0.6)
    Vi = np.linalg.inv(dense_V(th, L))
    dense = np.linalg.solve(L.X.T @ Vi @ L.X, L.X.T @ Vi @ L.y_s)
    np.testing.assert_allclose(wls_beta(th, L, L.y_s), dense, rtol=1e-10)


def test_loglik_matches_dense(small_layout):
    L, th = small_layout, (0.3, 0.6)
    V = dense_V(th, L)
    y = L.y_s
    dense = -0.5 * (np.linalg.slogdet(V)[1] + y @ dense_P(th, L) @ y)
    assert penalized_loglik(th, L, y) == pytest.approx(dense, rel=1e-11)


def test_score_is_gradient_of_loglik(small_layout):
    L = small_layout
    x = np.array([0.4, 0.7])
    fd = _fd_grad(lambda t: penalized_loglik(t, L, L.y_s), x)
    np.testing.assert_allclose(score(x, L, L.y_s), fd, rtol=1e-6)


def test_hessian_is_derivative_of_score(small_layout):
    L = small_layout
    x = np.array([0.4, 0.7])
    st = score_hessian_fisher(x, L, L.y_s)
    np.testing.assert_allclose(st.s, score(x, L, L.y_s), rtol=1e-12)
    Hfd = np.column_stack([_fd_grad(lambda t: score(t, L, L.y_s)[k], x) for k in range(2)])
    np.testing.assert_allclose(st.H, Hfd.T, rtol=1e-6)


def test_fisher_is_expected_negative_hessian(small_layout):
    L, th = small_layout, np.array([0.3, 0.6])
    rng = np.random.default_rng(5)
    C = np.linalg.cholesky(dense_V(th, L))
    Hs = []
    for _ in range(4000):
        y = L.X @ np.array([0.5, -0.2]) + C @ rng.normal(size=L.n)
        Hs.append(score_hessian_fisher(th, L, y).H)
    Hs = np.array(Hs)
    F = fisher_information(th, L)
    se = Hs.std(axis=0) / np.sqrt(len(Hs))
    assert np.all(np.abs(-Hs.mean(axis=0) - F) < 4 * se)


def test_fisher_positive_definite_interior():
    for seed in range(20):
        L = make_layout(seed=seed, D=8)
        th = np.random.default_rng(seed).uniform([0.05, 0.1], [2, 2])
        assert np.linalg.eigvalsh(fisher_information(th, L)).min() > 0


def test_score_bias_is_mean_score(small_layout):
    L, th = small_layout, np.array([0.3, 0.6])
    rng = np.random.default_rng(6)
    C = np.linalg.cholesky(dense_V(th, L))
    S = np.array([score(th, L, L.X @ np.array([0.5, -0.2]) + C @ rng.normal(size=L.n)) for _ in range(20000)])
    se = S.std(axis=0) / np.sqrt(len(S))
    assert np.all(np.abs(S.mean(axis=0) - score_bias(th, L)) < 4 * se)


def test_fit_converges_with_zero_score(desk_layout):
    fit = fit_ml(desk_layout)
    assert fit.converged and not fit.boundary_hit
    s = score(fit.theta_hat, desk_layout, desk_layout.y_s)
    assert np.abs(np.linalg.solve(fit.fisher_at_hat, s)).max() < 1e-8
    assert fit.loglik == pytest.approx(penalized_loglik(fit.theta_hat, desk_layout, desk_layout.y_s), rel=1e-14)
    np.testing.assert_allclose(fit.beta_hat, wls_beta(fit.theta_hat, desk_layout, desk_layout.y_s))


def test_fit_boundary():
    L = make_layout(seed=4, D=10, n_range=(3, 6), theta=(0.0, 1.0))
    # remove area effects entirely and center areas to push sigma_u2 to 0
    y = L.y_s - (L.block_sums(L.y_s) / L.n_d)[L.area_index] + L.X @ np.array([0.5, -0.2])
    fit = fit_ml(L, y)
    assert fit.theta_hat.sigma_u2 == 0.0 and fit.boundary_hit
    s = score(fit.theta_hat, L, y)
    assert s[0] <= 1e-8  # Kuhn-Tucker condition at the boundary
    assert abs(s[1]) < 1e-6


def test_fit_nonconvergence_reports_state(desk_layout):
    with pytest.raises(NonConvergenceError) as ei:
        fit_ml(desk_layout, options=FitOptions(max_iter=1, tol=1e-300))
    assert ei.value.iterations == 1 and ei.value.theta.shape == (2,)


def test_moment_start_is_valid(desk_layout):
    th = moment_start(desk_layout, desk_layout.y_s)
    assert th.sigma_u2 > 0 and th.sigma_e2 > 0


def test_warm_start_same_fixed_point(desk_layout):
    a = fit_ml(desk_layout)
    b = fit_ml(desk_layout, options=FitOptions(theta_init=a.theta_hat))
    np.testing.assert_allclose(a.theta_hat.as_array(), b.theta_hat.as_array(), rtol=1e-7)
