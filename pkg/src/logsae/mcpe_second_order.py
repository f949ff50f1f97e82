"""Second-order MCPE of second-stage EB predictors (theta estimated by ML).

MCPE(w^E_i, w^E_j) ~ M1_ij + M2_ij + M3_ij + M3_ji, with
  M2_ij ~ E{(w^E_i - w^_i)(w^E_j - w^_j)}       (theta-estimation variance)
  M3_ij ~ E{(w^E_i - w^_i)(w^_j - w_j)}         (crossed product)

Within area d every vector in the expansion (eta_d and its theta-derivatives) is
constant on the area's sample block, so all bracket quantities reduce to
area-level scalars; the (i, j) dependence enters only through the exponential
prefactors E_dij and E*_dij.

The crossed product needs the joint law of an out-of-sample w_j and the sample.
``form="derived"`` writes u_d = eta_d'v_s + r with r independent of v_s, which
turns the w_j tilt into eta_d and makes the starred bracket equal the
unstarred one; the crossed product is then O(D^{-2}).
``form="literal"`` places the out-of-sample unit at sample position j
(eta*_dj = eta_d + a_dj, coefficient 1) with the stated E*_dij, and is kept
for comparison.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mcpe_exact import _check_form
from .ml_fit import fisher_information, score_bias
from .model_core import PopulationLayout, _theta_pair, assemble_Qs, p_trace, vinv_trace

_CHUNK = 512


class SingularFisherError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class SecondOrderTensors:
    """theta-level quantities shared by every area and unit pair."""

    F: np.ndarray
    F_inv: np.ndarray
    nu: np.ndarray
    Phi: np.ndarray  # phi_tk = tr(P D_t P D_k)
    Phi_k: np.ndarray  # Phi_k[k][h, l] = tr(P D_h P D_k P D_l)
    Gamma_h: np.ndarray  # Gamma_h[h][t, k] = tr(V^-1 D_h V^-1 D_t V^-1 D_k)
    P_h: np.ndarray  # P_h[h][t, k] = -a_htk + tr(A_htk V) = 3 phi_htk - a_htk
    varsigma: np.ndarray
    Q: np.ndarray


def second_order_tensors(theta, layout: PopulationLayout) -> SecondOrderTensors:
    Q = assemble_Qs(theta, layout)
    F = fisher_information(theta, layout, Q)
    if not np.all(np.isfinite(F)) or np.linalg.eigvalsh(F).min() <= 0:
        raise SingularFisherError(f"Fisher information not positive definite: {F.tolist()}")
    F_inv = np.linalg.inv(F)
    Phi = np.array([[p_trace(theta, layout, (t, k), Q) for k in (1, 2)] for t in (1, 2)])
    phi3 = np.empty((2, 2, 2))
    a3 = np.empty((2, 2, 2))
    for h in (1, 2):
        for t in (1, 2):
            for k in (1, 2):
                phi3[h - 1, t - 1, k - 1] = p_trace(theta, layout, (h, t, k), Q)
                a3[h - 1, t - 1, k - 1] = vinv_trace(theta, layout, (h, t, k))
    Phi_k = np.transpose(phi3, (1, 0, 2))  # Phi_k[k][h, l] = phi_hkl
    P_h = 3.0 * phi3 - a3
    varsigma = np.array([np.trace(F_inv @ P_h[h]) for h in range(2)])
    return SecondOrderTensors(F, F_inv, score_bias(theta, layout, Q), Phi, Phi_k, a3, P_h, varsigma, Q)


@dataclass(frozen=True)
class EtaBundle:
    """eta_d = su2 V^-1 Z m_d is e * (indicator of area d); derivatives likewise."""

    n_d: int
    kappa: float
    e: float
    d_e: np.ndarray  # d e / d theta
    d2_e: np.ndarray  # 2 x 2 second partials
    d_alpha: np.ndarray
    d2_alpha: np.ndarray


def eta_bundle(theta, n_d: int) -> EtaBundle:
    su2, se2 = _theta_pair(theta)
    n = float(n_d)
    k = se2 + n * su2
    return EtaBundle(
        n_d=n_d,
        kappa=k,
        e=su2 / k,
        d_e=np.array([se2 / k**2, -su2 / k**2]),
        d2_e=np.array([[-2 * n * se2, k - 2 * se2], [k - 2 * se2, 2 * su2]]) / k**3,
        d_alpha=0.5 * np.array([se2**2 / k**2, n * su2**2 / k**2 + 1.0]),
        d2_alpha=np.array([[-n * se2**2, n * su2 * se2], [n * su2 * se2, -n * su2**2]]) / k**3,
    )


@dataclass(frozen=True)
class Brackets:
    """Area-level factors: M2 = E * m2, T = E * t (and starred analogues)."""

    m2: float
    t: float
    m2_star: float
    t_star: float


def _t_bracket(tens: SecondOrderTensors, eb: EtaBundle, r, dEta_E, B, eps) -> float:
    Fi = tens.F_inv
    G = np.stack([r @ Fi @ tens.Phi_k[k] for k in range(2)])
    inner = dEta_E + 0.5 * (eb.d2_alpha + B) - G
    return float(np.trace(Fi @ inner) + r @ Fi @ (tens.nu + 0.5 * (eps + tens.varsigma)))


def brackets(theta, tens: SecondOrderTensors, n_d: int, form: str = "derived") -> Brackets:
    _check_form(form)
    eb = eta_bundle(theta, n_d)
    n, k, e, g = float(n_d), eb.kappa, eb.e, eb.d_e
    Fi = tens.F_inv
    delta = np.array([n * n, n])  # 1'D_h 1 on the area block
    trace_part = float(np.trace(Fi @ (n * k * np.outer(g, g))))
    r = eb.d_alpha + 2.0 * n * k * e * g
    m2 = trace_part + float(r @ Fi @ r)
    t = _t_bracket(tens, eb, r, 2.0 * e * np.outer(g, delta), 2.0 * n * k * e * eb.d2_e, 4.0 * e * e * delta)
    if form == "derived":
        return Brackets(m2, t, m2, t)
    # eta* = eta_d + a_dj; 1'eta* = n e + 1 and 1'V eta* = kappa (n e + 1)
    s1 = n * e + 1.0
    r_s = eb.d_alpha + (n * k * e + k) * g
    m2_s = trace_part + float(r_s @ Fi @ r_s)
    eps_s = np.array([s1 * s1, n * e * e + 2 * e + 1.0])
    t_s = _t_bracket(tens, eb, r_s, s1 * np.outer(g, [n, 1.0]), k * s1 * eb.d2_e, eps_s)
    return Brackets(m2, t, m2_s, t_s)


def _log_E_block(beta, theta, n_d, X_i, X_j, Q, xbar):
    """log E_dij = 2 alpha + x_ij'beta + x_ij'Q x_ij / 2 + 2 gamma (su2 - gamma h_d)."""
    su2, se2 = _theta_pair(theta)
    kap = se2 + n_d * su2
    g = n_d * su2 / kap
    two_alpha = su2 * se2 / kap + se2
    beta = np.asarray(beta, float)
    XiQ = X_i @ Q
    h_ij = XiQ @ X_j.T
    h_ii = np.einsum("ip,ip->i", XiQ, X_i)[:, None]
    h_jj = np.einsum("ip,ip->i", X_j @ Q, X_j)[None, :]
    h_d = float(xbar @ Q @ xbar)
    xb = (X_i @ beta)[:, None] + (X_j @ beta)[None, :]
    return two_alpha + xb + 0.5 * (h_ii + h_jj) + h_ij + 2 * g * (su2 - g * h_d), (g, h_ii, h_ij, h_d, xb, XiQ)


def _log_E_star_block(beta, theta, n_d, X_i, X_j, Q, xbar, form):
    su2, se2 = _theta_pair(theta)
    kap = se2 + n_d * su2
    g = n_d * su2 / kap
    two_alpha = su2 * se2 / kap + se2
    beta = np.asarray(beta, float)
    XiQ = X_i @ Q
    h_ii = np.einsum("ip,ip->i", XiQ, X_i)[:, None]
    h_i = (XiQ @ xbar)[:, None]
    h_d = float(xbar @ Q @ xbar)
    xb = (X_i @ beta)[:, None] + (X_j @ beta)[None, :]
    if form == "derived":
        # log E(w^_i w_j) = 2 alpha + x_ij'beta + (b_i + eta)'V(b_i + eta)/2
        return two_alpha + xb + 0.5 * h_ii + g * h_i + 2 * g * su2 - 1.5 * g * g * h_d
    h_ij_c = (XiQ - g * (xbar @ Q)[None, :]) @ X_j.T  # (x_i - gamma xbar)'Q x_j
    return 0.5 * two_alpha + xb + se2 + su2 * (3 + g) + 2 * h_ij_c + h_ii - g * g * h_d


def e_dij(beta, theta, layout: PopulationLayout, area_pos: int, i: int, j: int, Q=None) -> float:
    area = layout.areas[area_pos]
    Q = assemble_Qs(theta, layout) if Q is None else Q
    lg, _ = _log_E_block(beta, theta, area.n_d, area.X_r[[i]], area.X_r[[j]], Q, layout.xbar[area_pos])
    return float(np.exp(lg[0, 0]))


def e_star_dij(beta, theta, layout: PopulationLayout, area_pos: int, i: int, j: int,
               form: str = "derived", Q=None) -> float:
    _check_form(form)
    area = layout.areas[area_pos]
    Q = assemble_Qs(theta, layout) if Q is None else Q
    lg = _log_E_star_block(beta, theta, area.n_d, area.X_r[[i]], area.X_r[[j]], Q, layout.xbar[area_pos], form)
    return float(np.exp(lg[0, 0]))


@dataclass(frozen=True)
class PairTerms:
    m2: np.ndarray
    m2_star: np.ndarray
    t: np.ndarray
    t_star: np.ndarray

    @property
    def m3(self) -> np.ndarray:
        return 0.5 * self.m2 + self.t - 0.5 * self.m2_star - self.t_star


def _pair_terms_block(beta, theta, tens, layout, area_pos, rows, cols, form) -> PairTerms:
    area = layout.areas[area_pos]
    br = brackets(theta, tens, area.n_d, form)
    X_i, X_j = area.X_r[rows], area.X_r[cols]
    lg, _ = _log_E_block(beta, theta, area.n_d, X_i, X_j, tens.Q, layout.xbar[area_pos])
    E = np.exp(lg)
    Es = np.exp(_log_E_star_block(beta, theta, area.n_d, X_i, X_j, tens.Q, layout.xbar[area_pos], form))
    Es = np.broadcast_to(Es, E.shape)
    return PairTerms(E * br.m2, Es * br.m2_star, E * br.t, Es * br.t_star)


def pair_terms(beta, theta, layout: PopulationLayout, area_pos: int, form: str = "derived",
               tens: SecondOrderTensors | None = None) -> PairTerms:
    """M2, M2*, T, T* for all ordered out-of-sample pairs of one area."""
    _check_form(form)
    tens = second_order_tensors(theta, layout) if tens is None else tens
    m = layout.areas[area_pos].X_r.shape[0]
    idx = np.arange(m)
    return _pair_terms_block(beta, theta, tens, layout, area_pos, idx, idx, form)


def _single(beta, theta, layout, area_pos, i, j, form, tens) -> PairTerms:
    _check_form(form)
    tens = second_order_tensors(theta, layout) if tens is None else tens
    return _pair_terms_block(beta, theta, tens, layout, area_pos, np.array([i]), np.array([j]), form)


def m2(beta, theta, layout, area_pos, i, j, tens=None) -> float:
    return float(_single(beta, theta, layout, area_pos, i, j, "derived", tens).m2[0, 0])


def m2_star(beta, theta, layout, area_pos, i, j, form="derived", tens=None) -> float:
    return float(_single(beta, theta, layout, area_pos, i, j, form, tens).m2_star[0, 0])


def t_term(beta, theta, layout, area_pos, i, j, starred=False, form="derived", tens=None) -> float:
    pt = _single(beta, theta, layout, area_pos, i, j, form, tens)
    return float((pt.t_star if starred else pt.t)[0, 0])


def m3(beta, theta, layout, area_pos, i, j, form="derived", tens=None) -> float:
    return float(_single(beta, theta, layout, area_pos, i, j, form, tens).m3[0, 0])


def mcpe_eb2(beta, theta, layout, area_pos, i, j, form="derived", tens=None) -> float:
    """M1 + M2 + M3_ij + M3_ji."""
    from .mcpe_exact import m1

    tens = second_order_tensors(theta, layout) if tens is None else tens
    a = _single(beta, theta, layout, area_pos, i, j, form, tens)
    b = _single(beta, theta, layout, area_pos, j, i, form, tens)
    return float(m1(beta, theta, layout, area_pos, i, j, form, tens.Q) + a.m2[0, 0] + a.m3[0, 0] + b.m3[0, 0])


@dataclass(frozen=True)
class AreaSecondOrder:
    """Area-mean aggregates N_d^{-2} sum_{i,j} of each term (both orders of every pair)."""

    m1: float
    m2: float
    m3: float  # sum over ordered pairs of M3_ij, i.e. half of sum(M3_ij + M3_ji)

    @property
    def mse(self) -> float:
        return self.m1 + self.m2 + 2.0 * self.m3


def area_pair_sums(beta, theta, layout: PopulationLayout, area_pos: int, form: str = "derived",
                   tens: SecondOrderTensors | None = None) -> tuple[float, float]:
    """N_d^{-2} sum_{i,j} of M2_ij and of M3_ij, streamed over row blocks."""
    _check_form(form)
    tens = second_order_tensors(theta, layout) if tens is None else tens
    area = layout.areas[area_pos]
    m = area.X_r.shape[0]
    s2 = s3 = 0.0
    cols = np.arange(m)
    for lo in range(0, m, _CHUNK):
        pt = _pair_terms_block(beta, theta, tens, layout, area_pos, np.arange(lo, min(lo + _CHUNK, m)), cols, form)
        s2 += float(pt.m2.sum())
        s3 += float(pt.m3.sum())
    N2 = float(area.N_d) ** 2
    return s2 / N2, s3 / N2


def area_terms(beta, theta, layout: PopulationLayout, area_pos: int, form: str = "derived",
               tens: SecondOrderTensors | None = None) -> AreaSecondOrder:
    from .mcpe_exact import m1_area

    _check_form(form)
    tens = second_order_tensors(theta, layout) if tens is None else tens
    if layout.areas[area_pos].X_r.shape[0] == 0:
        return AreaSecondOrder(0.0, 0.0, 0.0)
    s2, s3 = area_pair_sums(beta, theta, layout, area_pos, form, tens)
    return AreaSecondOrder(m1_area(beta, theta, layout, area_pos, form, tens.Q), s2, s3)


def mse_eb2_area(beta, theta, layout, area_pos, form="derived", tens=None) -> float:
    return area_terms(beta, theta, layout, area_pos, form, tens).mse
