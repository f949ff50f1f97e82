import numpy as np
import pytest

from logsae.mcpe_exact import m1
from logsae.mcpe_second_order import (
    area_pair_sums, area_terms, brackets, e_dij, e_star_dij, eta_bundle, m2, m3, mcpe_eb2, pair_terms,
    second_order_tensors, t_term,
)
from logsae.ml_fit import fisher_information, score_bias
from logsae.model_core import p_trace, vinv_trace
from logsae.sim_oracle import desk_design

from conftest import make_layout
from oracles import eb1_coefficients, joint_moments

TH = (0.25, 0.5)


@pytest.fixture(scope="module")
def desk():
    des = desk_design()
    L = des.layout()
    return des, L, second_order_tensors(TH, L)


def test_tensor_symmetries(desk):
    _, L, t = desk
    np.testing.assert_allclose(t.Phi, t.Phi.T, rtol=1e-12)
    for h in range(2):
        for a in range(2):
            for b in range(2):
                # a_htk invariant under cyclic permutation; phi_hkl likewise
                assert t.Gamma_h[h, a, b] == pytest.approx(t.Gamma_h[a, b, h], rel=1e-9)
                assert t.Phi_k[a][h, b] == pytest.approx(t.Phi_k[h][b, a], rel=1e-9)
    np.testing.assert_allclose(t.F, fisher_information(TH, L), rtol=1e-14)
    np.testing.assert_allclose(t.nu, score_bias(TH, L), rtol=1e-14)
    assert t.Phi[0, 1] == pytest.approx(p_trace(TH, L, (1, 2)), rel=1e-14)
    assert t.Gamma_h[0, 1, 1] == pytest.approx(vinv_trace(TH, L, (1, 2, 2)), rel=1e-14)


def test_eta_bundle_derivatives_match_fd():
    n = 4

    def e(x):
        return x[0] / (x[1] + n * x[0])

    def alpha(x):
        k = x[1] + n * x[0]
        return 0.5 * (x[0] * x[1] / k + x[1])

    x0 = np.array(TH)
    eb = eta_bundle(TH, n)
    h = 1e-5
    for f, d1, d2 in ((e, eb.d_e, eb.d2_e), (alpha, eb.d_alpha, eb.d2_alpha)):
        for k in range(2):
            ek = np.eye(2)[k] * h
            g = (f(x0 + ek) - f(x0 - ek)) / (2 * h)
            assert d1[k] == pytest.approx(g, rel=1e-6)
            for l in range(2):
                el = np.eye(2)[l] * h
                hk = (f(x0 + ek + el) - f(x0 + ek - el) - f(x0 - ek + el) + f(x0 - ek - el)) / (4 * h * h)
                assert d2[k, l] == pytest.approx(hk, rel=1e-5, abs=1e-8)


def test_derived_starred_brackets_equal(desk):
    _, _, t = desk
    b = brackets(TH, t, 4)
    assert b.m2_star == b.m2 and b.t_star == b.t
    lit = brackets(TH, t, 4, form="literal")
    assert lit.m2 == b.m2 and lit.m2_star != b.m2


def test_m3_identity(desk):
    des, L, t = desk
    b = brackets(TH, t, 4)
    E = e_dij(des.beta, TH, L, 0, 0, 1, t.Q)
    Es = e_star_dij(des.beta, TH, L, 0, 0, 1, Q=t.Q)
    assert m3(des.beta, TH, L, 0, 0, 1, tens=t) == pytest.approx((E - Es) * (0.5 * b.m2 + b.t), rel=1e-12)
    assert m2(des.beta, TH, L, 0, 0, 1, tens=t) == pytest.approx(E * b.m2, rel=1e-14)
    assert t_term(des.beta, TH, L, 0, 0, 1, tens=t) == pytest.approx(E * b.t, rel=1e-14)


def _m2_delta_oracle(L, beta, i, j, F_inv, h=1e-6):
    """E[(dw^_i)' F^-1 (dw^_j)] with w^ the dense first-stage predictor and closed-form tilted moments."""
    mu, S = joint_moments(L, TH, beta, 0, i, j)

    def coef(t, k):
        b, c = eb1_coefficients(L, t, 0, k)
        return np.concatenate([b, [0, 0]]), c

    def deriv(k):
        out = []
        for q in range(2):
            e = np.eye(2)[q] * h
            p, m = coef(tuple(np.array(TH) + e), k), coef(tuple(np.array(TH) - e), k)
            out.append(((p[0] - m[0]) / (2 * h), (p[1] - m[1]) / (2 * h)))
        return out

    (ai, ci), (aj, cj) = coef(TH, i), coef(TH, j)
    di, dj = deriv(i), deriv(j)
    a = ai + aj
    base = np.exp(a @ mu + 0.5 * a @ S @ a + ci + cj)
    mm = mu + S @ a
    G = np.array([[(di[k][0] @ mm + di[k][1]) * (dj[l][0] @ mm + dj[l][1]) + di[k][0] @ S @ dj[l][0]
                   for l in range(2)] for k in range(2)])
    return base * np.sum(F_inv * G)


@pytest.mark.parametrize("pair", [(0, 0), (0, 1)])
def test_m2_matches_dense_delta_method(pair):
    ratios = []
    for D in (50, 100):
        des = desk_design(D=D, N_d=8)
        L = des.layout()
        t = second_order_tensors(TH, L)
        ref = _m2_delta_oracle(L, des.beta, *pair, t.F_inv)
        ratios.append(pair_terms(des.beta, TH, L, 0, tens=t).m2[pair] / ref)
    assert abs(ratios[1] - 1) < 0.02
    # the two definitions differ at relative order D^-1
    if abs(ratios[0] - 1) > 5e-3:
        assert 0.35 < abs(ratios[1] - 1) / abs(ratios[0] - 1) < 0.65


def test_halving_under_duplication(desk):
    des, L, t = desk
    L2 = L.replicate(2)
    t2 = second_order_tensors(TH, L2)
    a, b = pair_terms(des.beta, TH, L, 0, tens=t), pair_terms(des.beta, TH, L2, 0, tens=t2)
    r = b.m2 / a.m2
    assert np.all((r > 0.4) & (r < 0.6))
    lit1 = pair_terms(des.beta, TH, L, 0, "literal", t).m3
    lit2 = pair_terms(des.beta, TH, L2, 0, "literal", t2).m3
    rl = lit2 / lit1
    assert np.all((rl > 0.4) & (rl < 0.6))
    # derived crossed term is of smaller order
    rd = b.m3 / a.m3
    assert np.all(np.abs(rd) < 0.4)


def test_area_aggregation(desk):
    des, L, t = desk
    pt = pair_terms(des.beta, TH, L, 3, tens=t)
    N2 = L.areas[3].N_d ** 2
    s2, s3 = area_pair_sums(des.beta, TH, L, 3, tens=t)
    assert s2 == pytest.approx(pt.m2.sum() / N2, rel=1e-12)
    assert s3 == pytest.approx(pt.m3.sum() / N2, rel=1e-12)
    at = area_terms(des.beta, TH, L, 3, tens=t)
    assert at.mse == pytest.approx(at.m1 + s2 + 2 * s3, rel=1e-14)
    v = mcpe_eb2(des.beta, TH, L, 3, 0, 1, tens=t)
    ref = m1(des.beta, TH, L, 3, 0, 1) + pt.m2[0, 1] + pt.m3[0, 1] + pt.m3[1, 0]
    assert v == pytest.approx(ref, rel=1e-13)


def test_singular_fisher_raises():
    from logsae.mcpe_second_order import SingularFisherError
    from logsae.model_core import AreaFrame, PopulationLayout

    # one unit per area: su2 and se2 enter only through their sum
    L = PopulationLayout([AreaFrame(d, np.ones((1, 1)), np.ones((1, 1))) for d in range(5)])
    with pytest.raises(SingularFisherError):
        second_order_tensors(TH, L)


def test_unbalanced_layout_runs():
    L = make_layout(seed=21, D=8, with_y=False)
    t = second_order_tensors(TH, L)
    for d, a in enumerate(L.areas):
        pt = pair_terms([0.5, -0.2], TH, L, d, tens=t)
        assert pt.m2.shape == (a.X_r.shape[0],) * 2
        assert np.all(np.diag(pt.m2) > 0)
