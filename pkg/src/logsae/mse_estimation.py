"""Plug-in MCPE/MSE estimators corrected for the O(D^{-1}) bias of M1(beta^, theta^).

E M1(beta^, theta^) = M1 + sum_k Lambda_k + o(D^{-1}), where for theta^ - theta
~ F^{-1}s + F^{-1}(H + F)F^{-1}s + F^{-1}d/2 and E(s) = nu:
  Lambda_1 = c1 (dM1)'F^{-1} nu
  Lambda_2 = -(dM1)'F^{-1} col_h tr(Phi_h F^{-1})
  Lambda_3 = (dM1)'F^{-1} col_h tr[(3 Phi_h - Gamma_h) F^{-1} Phi F^{-1}] / 4
  Lambda_4 = tr[(d2M1) F^{-1} Phi F^{-1}] / 4
  Lambda_5 = c5 M1 x_ij'Q x_ij
The expansion gives c1 = 1 and c5 = 1/2 (form="derived"); form="literal" uses
c1 = 2 and c5 = 1 together with the literal M1.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .mcpe_exact import _check_form, _xqx, m1_area_sums, m1_matrix, m1_unit_diagonal
from .mcpe_second_order import SecondOrderTensors, area_pair_sums, pair_terms, second_order_tensors
from .ml_fit import FitResult
from .model_core import PopulationLayout, Theta

log = logging.getLogger(__name__)


def fd_derivatives(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, rel_step: float = 1e-4,
                   lower: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Gradient and Hessian of an array-valued f at x by finite differences.

    Step h_k = rel_step (1 + |x_k|). Central stencils with one Richardson level,
    except in coordinates where x_k - 2h_k would cross ``lower``, which use
    second-order one-sided stencils. Returns arrays with the derivative axes
    first: grad[k], hess[k, l].
    """
    x = np.asarray(x, dtype=float)
    k = x.size
    h = rel_step * (1.0 + np.abs(x))
    lower = np.full(k, -np.inf) if lower is None else np.asarray(lower, float)
    one_sided = x - 2 * h < lower
    cache: dict[tuple, np.ndarray] = {}

    def F(off: tuple) -> np.ndarray:
        key = tuple(round(o, 12) for o in off)
        if key not in cache:
            cache[key] = np.asarray(f(x + np.asarray(off) * h), dtype=float)
        return cache[key]

    def unit(i, a):
        o = [0.0] * k
        o[i] = a
        return o

    # 1-D rules as (offsets, first-derivative weights, second-derivative weights), in units of h
    def rule(i):
        if one_sided[i]:
            return [0.0, 1.0, 2.0, 3.0], [-1.5, 2.0, -0.5, 0.0], [2.0, -5.0, 4.0, -1.0]
        return None

    f0 = F(tuple([0.0] * k))
    grad = np.zeros((k,) + f0.shape)
    hess = np.zeros((k, k) + f0.shape)
    for i in range(k):
        r = rule(i)
        if r is None:
            d1 = lambda s: (F(tuple(unit(i, s))) - F(tuple(unit(i, -s)))) / (2 * s * h[i])
            d2 = lambda s: (F(tuple(unit(i, s))) - 2 * f0 + F(tuple(unit(i, -s)))) / (s * s * h[i] ** 2)
            grad[i] = (4 * d1(0.5) - d1(1.0)) / 3
            hess[i, i] = (4 * d2(0.5) - d2(1.0)) / 3
        else:
            offs, w1, w2 = r
            grad[i] = sum(w * F(tuple(unit(i, o))) for o, w in zip(offs, w1)) / h[i]
            hess[i, i] = sum(w * F(tuple(unit(i, o))) for o, w in zip(offs, w2)) / h[i] ** 2
    for i in range(k):
        for j in range(i + 1, k):
            def mixed(s):
                oi = [-s, s] if not one_sided[i] else None
                oj = [-s, s] if not one_sided[j] else None
                if oi is not None and oj is not None:
                    tot = 0.0
                    for a in (-1, 1):
                        for b in (-1, 1):
                            o = [0.0] * k
                            o[i], o[j] = a * s, b * s
                            tot = tot + a * b * F(tuple(o))
                    return tot / (4 * s * s * h[i] * h[j])
                # one-sided in (at least) one coordinate: forward 3-point rule there
                def dir_rule(c):
                    if one_sided[c]:
                        return [0.0, s, 2 * s], [-1.5 / s, 2.0 / s, -0.5 / s]
                    return [-s, s], [-0.5 / s, 0.5 / s]
                oi_, wi = dir_rule(i)
                oj_, wj = dir_rule(j)
                tot = 0.0
                for a, wa in zip(oi_, wi):
                    for b, wb in zip(oj_, wj):
                        o = [0.0] * k
                        o[i], o[j] = a, b
                        tot = tot + wa * wb * F(tuple(o))
                return tot / (h[i] * h[j])
            if one_sided[i] or one_sided[j]:
                hess[i, j] = hess[j, i] = mixed(1.0)
            else:
                hess[i, j] = hess[j, i] = (4 * mixed(0.5) - mixed(1.0)) / 3
    return grad, hess


def _theta_obj(theta) -> Theta:
    return theta if isinstance(theta, Theta) else Theta.from_array(np.asarray(theta, float))


def _coefficients(form: str) -> tuple[float, float]:
    return (1.0, 0.5) if form == "derived" else (2.0, 1.0)


def _bias_directions(tens: SecondOrderTensors, c1: float):
    """Vectors v1, v2, v3 and matrix C with Lambda_{1..3} = v_k'dM1, Lambda_4 = tr(C d2M1)/4."""
    Fi, Phi = tens.F_inv, tens.Phi
    v1 = c1 * Fi @ tens.nu
    v2 = -Fi @ np.array([np.trace(tens.Phi_k[h] @ Fi) for h in range(2)])
    C = Fi @ Phi @ Fi
    v3 = 0.25 * Fi @ np.array([np.trace((3 * tens.Phi_k[h] - tens.Gamma_h[h]) @ C) for h in range(2)])
    return v1, v2, v3, C


def _lambda_stack(g: np.ndarray, H: np.ndarray, m1_xqx: np.ndarray, tens: SecondOrderTensors,
                  form: str) -> np.ndarray:
    """Stack (Lambda_1, ..., Lambda_5) for any array of targets sharing the trailing shape."""
    c1, c5 = _coefficients(form)
    v1, v2, v3, C = _bias_directions(tens, c1)
    return np.stack([
        np.tensordot(v1, g, axes=1),
        np.tensordot(v2, g, axes=1),
        np.tensordot(v3, g, axes=1),
        0.25 * np.tensordot(C, H, axes=([0, 1], [0, 1])),
        c5 * m1_xqx,
    ])


def _theta_fd(fn, th: Theta):
    """FD derivatives in theta, clipping sigma_u2 at 0 and one-sided near the boundary."""
    return fd_derivatives(lambda x: fn((max(x[0], 0.0), x[1])), th.as_array(), lower=np.zeros(2))


@dataclass(frozen=True)
class LambdaTerms:
    """Bias terms for a set of targets; axis 0 of ``lambdas`` indexes Lambda_1..Lambda_5."""

    lambdas: np.ndarray
    m1: np.ndarray
    d_m1: np.ndarray
    d2_m1: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.lambdas.sum(axis=0)


def lambda_terms(beta, theta, layout: PopulationLayout, area_pos: int, form: str = "derived",
                 tens: SecondOrderTensors | None = None) -> LambdaTerms:
    """Lambda terms for every ordered out-of-sample pair of one area (each m x m)."""
    _check_form(form)
    th = _theta_obj(theta)
    tens = second_order_tensors(th, layout) if tens is None else tens
    g, H = _theta_fd(lambda t: m1_matrix(beta, t, layout, area_pos, form), th)
    M1 = m1_matrix(beta, th, layout, area_pos, form, tens.Q)
    X_r = layout.areas[area_pos].X_r
    return LambdaTerms(_lambda_stack(g, H, M1 * _xqx(tens.Q, X_r, X_r), tens, form), M1, g, H)


def area_lambda_all(beta, theta, layout: PopulationLayout, form: str = "derived",
                    tens: SecondOrderTensors | None = None) -> LambdaTerms:
    """Lambda terms of the area-mean M1 for every area at once (each of length D)."""
    _check_form(form)
    th = _theta_obj(theta)
    tens = second_order_tensors(th, layout) if tens is None else tens
    g, H = _theta_fd(lambda t: m1_area_sums(beta, t, layout, form), th)
    m1, m1_xqx = m1_area_sums(beta, th, layout, form, tens.Q, weight_xqx=True)
    return LambdaTerms(_lambda_stack(g, H, m1_xqx, tens, form), m1, g, H)


def unit_lambda_all(beta, theta, layout: PopulationLayout, form: str = "derived",
                    tens: SecondOrderTensors | None = None) -> LambdaTerms:
    """Lambda terms of M1_ii for every out-of-sample unit, stacked area by area."""
    _check_form(form)
    th = _theta_obj(theta)
    tens = second_order_tensors(th, layout) if tens is None else tens
    g, H = _theta_fd(lambda t: m1_unit_diagonal(beta, t, layout, form), th)
    m1 = m1_unit_diagonal(beta, th, layout, form, tens.Q)
    X_r = np.vstack([a.X_r for a in layout.areas])
    xqx = 4 * np.einsum("ip,ip->i", X_r @ tens.Q, X_r)
    return LambdaTerms(_lambda_stack(g, H, m1 * xqx, tens, form), m1, g, H)


@dataclass(frozen=True)
class AreaMseEstimate:
    area_id: object
    m1: float
    lambda_sum: float
    m2: float
    m3: float  # N^-2 sum over ordered pairs of M3_ij
    mse_bp: float  # M1 - sum Lambda (first-stage target)
    mse_eb2: float  # M1 - sum Lambda + M2 + 2 M3
    boundary: bool

    @property
    def negative(self) -> bool:
        return self.mse_eb2 < 0


def mcpe_estimate_bp(fit: FitResult, layout: PopulationLayout, area_pos: int, i: int, j: int,
                     form: str = "derived", tens=None) -> float:
    """M1(beta^, theta^) - sum_k Lambda_k(beta^, theta^)."""
    lt = lambda_terms(fit.beta_hat, fit.theta_hat, layout, area_pos, form, tens)
    return float(lt.m1[i, j] - lt.total[i, j])


def mcpe_estimate_eb2(fit: FitResult, layout: PopulationLayout, area_pos: int, i: int, j: int,
                      form: str = "derived", tens=None) -> float:
    """M1 - sum Lambda + M2 + M3_ij + M3_ji, all at (beta^, theta^)."""
    tens = second_order_tensors(fit.theta_hat, layout) if tens is None else tens
    lt = lambda_terms(fit.beta_hat, fit.theta_hat, layout, area_pos, form, tens)
    pt = pair_terms(fit.beta_hat, fit.theta_hat, layout, area_pos, form, tens)
    m3 = pt.m3
    return float(lt.m1[i, j] - lt.total[i, j] + pt.m2[i, j] + m3[i, j] + m3[j, i])


def mcpe_estimate_eb2_matrix(fit: FitResult, layout: PopulationLayout, area_pos: int,
                             form: str = "derived", tens=None) -> np.ndarray:
    tens = second_order_tensors(fit.theta_hat, layout) if tens is None else tens
    lt = lambda_terms(fit.beta_hat, fit.theta_hat, layout, area_pos, form, tens)
    pt = pair_terms(fit.beta_hat, fit.theta_hat, layout, area_pos, form, tens)
    return lt.m1 - lt.total + pt.m2 + pt.m3 + pt.m3.T


def mse_estimate_eb2_area(fit: FitResult, layout: PopulationLayout, area_pos: int,
                          form: str = "derived", tens=None) -> AreaMseEstimate:
    """Area-mean aggregation N_d^{-2}(2 sum_{i<j} mcpe_ij + sum_i mse_i)."""
    area = layout.areas[area_pos]
    if area.X_r.shape[0] == 0:
        return AreaMseEstimate(area.area_id, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, fit.boundary_hit)
    tens = second_order_tensors(fit.theta_hat, layout) if tens is None else tens
    lt = lambda_terms(fit.beta_hat, fit.theta_hat, layout, area_pos, form, tens)
    pt = pair_terms(fit.beta_hat, fit.theta_hat, layout, area_pos, form, tens)
    N2 = float(area.N_d) ** 2
    m1 = float(lt.m1.sum()) / N2
    lam = float(lt.total.sum()) / N2
    m2 = float(pt.m2.sum()) / N2
    m3 = float(pt.m3.sum()) / N2
    return AreaMseEstimate(area.area_id, m1, lam, m2, m3, m1 - lam, m1 - lam + m2 + 2 * m3, fit.boundary_hit)


def mse_estimates(fit: FitResult, layout: PopulationLayout, form: str = "derived") -> list[AreaMseEstimate]:
    """Second-order area-mean MSE estimates for every area."""
    tens = second_order_tensors(fit.theta_hat, layout)
    lam = area_lambda_all(fit.beta_hat, fit.theta_hat, layout, form, tens)
    out = []
    for d, area in enumerate(layout.areas):
        if area.X_r.shape[0] == 0:
            out.append(AreaMseEstimate(area.area_id, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, fit.boundary_hit))
            continue
        m2, m3 = area_pair_sums(fit.beta_hat, fit.theta_hat, layout, d, form, tens)
        m1, ls = float(lam.m1[d]), float(lam.total[d])
        out.append(AreaMseEstimate(area.area_id, m1, ls, m2, m3, m1 - ls, m1 - ls + m2 + 2 * m3, fit.boundary_hit))
    neg = sum(e.negative for e in out)
    if neg:
        log.warning("%d area MSE estimates are negative", neg)
    return out


def unit_mse_estimates(fit: FitResult, layout: PopulationLayout, form: str = "derived") -> np.ndarray:
    """mse(w^E_di) = M1_ii - sum Lambda + M2_ii + 2 M3_ii for every out-of-sample unit, stacked by area."""
    tens = second_order_tensors(fit.theta_hat, layout)
    lam = unit_lambda_all(fit.beta_hat, fit.theta_hat, layout, form, tens)
    extra = []
    for d, area in enumerate(layout.areas):
        if area.X_r.shape[0] == 0:
            continue
        pt = pair_terms(fit.beta_hat, fit.theta_hat, layout, d, form, tens)
        extra.append(np.diag(pt.m2) + 2 * np.diag(pt.m3))
    extra = np.concatenate(extra) if extra else np.zeros(0)
    return lam.m1 - lam.total + extra
