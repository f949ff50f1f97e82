"""Exact MCPE of best and first-stage EB predictors of w = exp(y).

Two forms are available for every closed form:

``form="derived"`` (default)
    Obtained from the joint Gaussian law of (y_s, u_d, e_di) with the
    out-of-sample errors independent of the sample. Uses the identity
    MCPE(w~_i, w~_j) = E(w_i w_j) - E(w~_i w~_j), which holds because w~ is a
    conditional mean. These forms agree with simulation.

``form="literal"``
    The closed forms as usually stated for this model, kept for comparison.
    They treat an out-of-sample unit as if it occupied a sample position and
    do not agree with simulation (e.g. the i != j best-predictor value has the
    wrong sign).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model_core import AreaFrame, PopulationLayout, _theta_pair, assemble_Qs, gamma_alpha

FORMS = ("derived", "literal")
_CHUNK = 512


def _check_form(form: str) -> None:
    if form not in FORMS:
        raise ValueError(f"form must be one of {FORMS}, got {form!r}")


@dataclass(frozen=True)
class HScalars:
    """Q_s-metric Gram quantities for the out-of-sample rows of one area."""

    h: np.ndarray  # h_ij = x_i' Q x_j (m x m)
    h_i: np.ndarray  # x_i' Q xbar (m)
    h_d: float  # xbar' Q xbar


@dataclass(frozen=True)
class SSums:
    S1: float  # sum_{i<j} exp((x_i + x_j)' beta)
    S2: float  # sum_i exp(2 x_i' beta)


def h_scalars(Q: np.ndarray, area: AreaFrame) -> HScalars:
    xbar = area.X_s.mean(axis=0)
    XQ = area.X_r @ Q
    return HScalars(XQ @ area.X_r.T, XQ @ xbar, float(xbar @ Q @ xbar))


def s_sums(beta, area: AreaFrame) -> SSums:
    e = np.exp(area.X_r @ np.asarray(beta, float))
    S2 = float(np.sum(e * e))
    return SSums(0.5 * (float(np.sum(e)) ** 2 - S2), S2)


def _bp_brackets(theta, n_d: int, form: str) -> tuple[float, float]:
    """(off-diagonal, diagonal) brackets multiplying exp(2su2 + se2 + x_ij'beta)."""
    su2, se2 = _theta_pair(theta)
    c = su2 * se2 / (se2 + n_d * su2)  # su2 (1 - gamma_d)
    if form == "derived":
        return -np.expm1(-c), np.expm1(se2) - np.expm1(-c)
    return np.expm1(-c), np.expm1(-c) + np.expm1(se2)


def mcpe_bp(beta, theta, area: AreaFrame, i: int, j: int, form: str = "derived") -> float:
    """MCPE(w~_di, w~_dj) of the best predictors at known (beta, theta)."""
    _check_form(form)
    m = area.X_r.shape[0]
    if not (0 <= i < m and 0 <= j < m):
        raise IndexError(f"units ({i}, {j}) out of range for {m} out-of-sample units")
    su2, se2 = _theta_pair(theta)
    off, diag = _bp_brackets(theta, area.n_d, form)
    xb = float((area.X_r[i] + area.X_r[j]) @ np.asarray(beta, float))
    return float(np.exp(2 * su2 + se2 + xb) * (diag if i == j else off))


def mcpe_bp_matrix(beta, theta, area: AreaFrame, form: str = "derived") -> np.ndarray:
    _check_form(form)
    su2, se2 = _theta_pair(theta)
    off, diag = _bp_brackets(theta, area.n_d, form)
    e = np.exp(area.X_r @ np.asarray(beta, float))
    M = np.exp(2 * su2 + se2) * np.outer(e, e) * off
    np.fill_diagonal(M, np.exp(2 * su2 + se2) * e * e * diag)
    return M


def mse_bp_area(beta, theta, area: AreaFrame, form: str = "derived") -> float:
    """MSE of the best predictor of the area mean, streamed through S1 and S2."""
    _check_form(form)
    if area.X_r.shape[0] == 0:
        return 0.0
    su2, se2 = _theta_pair(theta)
    off, diag = _bp_brackets(theta, area.n_d, form)
    S = s_sums(beta, area)
    return float(np.exp(2 * su2 + se2) * (2 * off * S.S1 + diag * S.S2) / area.N_d**2)


def _m1_block(beta, theta, n_d, X_i, X_j, Q, xbar, same: np.ndarray, form: str) -> np.ndarray:
    """M1 for all (i, j) row pairs; leading batch axes of X_i, X_j, n_d, xbar broadcast."""
    su2, se2 = _theta_pair(theta)
    n_d = np.asarray(n_d, float)[..., None, None]
    kappa = se2 + n_d * su2
    g = n_d * su2 / kappa
    c = su2 * se2 / kappa
    beta = np.asarray(beta, float)
    XiQ, XjQ = X_i @ Q, X_j @ Q
    h_ij = XiQ @ np.swapaxes(X_j, -1, -2)
    h_ii = np.einsum("...ip,...ip->...i", XiQ, X_i)[..., :, None]
    h_jj = np.einsum("...ip,...ip->...i", XjQ, X_j)[..., None, :]
    xbar = np.asarray(xbar, float)
    h_i = np.einsum("...ip,...p->...i", XiQ, xbar)[..., :, None]
    h_j = np.einsum("...ip,...p->...i", XjQ, xbar)[..., None, :]
    h_d = np.einsum("...p,pq,...q->...", xbar, Q, xbar)[..., None, None]
    xb = (X_i @ beta)[..., :, None] + (X_j @ beta)[..., None, :]
    ind = same.astype(float)
    if form == "derived":
        pre = np.exp(xb + 2 * su2 - c + se2)  # x_ij'beta + su2(1 + gamma) + se2
        br = (
            np.expm1(0.5 * (h_ii + h_jj) + h_ij - 2 * g * g * h_d)
            - np.expm1(0.5 * h_ii + g * h_i - 1.5 * g * g * h_d)
            - np.expm1(0.5 * h_jj + g * h_j - 1.5 * g * g * h_d)
            + np.expm1(c + se2 * ind)
        )
    else:
        pre = np.exp(xb + 2 * su2 + se2 * (1 + ind))
        br = (
            np.expm1(0.5 * (h_ii + h_jj) + h_ij - 2 * g * g * h_d - c)
            - np.expm1(0.5 * (h_jj - g * g * h_d) + h_ij - g * g * h_i)
            - np.expm1(0.5 * (h_ii - g * g * h_d) + h_ij - g * g * h_j)
        )
    return pre * br


def m1(beta, theta, layout: PopulationLayout, area_pos: int, i: int, j: int,
       form: str = "derived", Q: np.ndarray | None = None) -> float:
    """MCPE(w^_di, w^_dj) of first-stage EB predictors (beta by WLS, theta known)."""
    _check_form(form)
    area = layout.areas[area_pos]
    m = area.X_r.shape[0]
    if not (0 <= i < m and 0 <= j < m):
        raise IndexError(f"units ({i}, {j}) out of range for {m} out-of-sample units")
    if Q is None:
        Q = assemble_Qs(theta, layout)
    val = _m1_block(beta, theta, area.n_d, area.X_r[[i]], area.X_r[[j]], Q,
                    layout.xbar[area_pos], np.array([[i == j]]), form)
    return float(val[0, 0])


def m1_matrix(beta, theta, layout: PopulationLayout, area_pos: int,
              form: str = "derived", Q: np.ndarray | None = None) -> np.ndarray:
    _check_form(form)
    area = layout.areas[area_pos]
    if Q is None:
        Q = assemble_Qs(theta, layout)
    m = area.X_r.shape[0]
    return _m1_block(beta, theta, area.n_d, area.X_r, area.X_r, Q, layout.xbar[area_pos],
                     np.eye(m, dtype=bool), form)


def m1_area(beta, theta, layout: PopulationLayout, area_pos: int,
            form: str = "derived", Q: np.ndarray | None = None) -> float:
    """N_d^{-2} sum_{i,j} M1_ij, streamed over row blocks of out-of-sample units."""
    _check_form(form)
    area = layout.areas[area_pos]
    m = area.X_r.shape[0]
    if m == 0:
        return 0.0
    if Q is None:
        Q = assemble_Qs(theta, layout)
    total = 0.0
    for lo in range(0, m, _CHUNK):
        rows = np.arange(lo, min(lo + _CHUNK, m))
        same = rows[:, None] == np.arange(m)[None, :]
        blk = _m1_block(beta, theta, area.n_d, area.X_r[rows], area.X_r, Q,
                        layout.xbar[area_pos], same, form)
        total += float(blk.sum())
    return total / area.N_d**2



def _xqx(Q, X_i, X_j) -> np.ndarray:
    """x_ij'Q x_ij for x_ij = x_i + x_j, all pairs (leading batch axes broadcast)."""
    XiQ = X_i @ Q
    a = np.einsum("...ip,...ip->...i", XiQ, X_i)
    b = np.einsum("...ip,...ip->...i", X_j @ Q, X_j)
    return a[..., :, None] + b[..., None, :] + 2 * XiQ @ np.swapaxes(X_j, -1, -2)


def m1_area_sums(beta, theta, layout: PopulationLayout, form: str = "derived",
                 Q: np.ndarray | None = None, weight_xqx: bool = False):
    """N_d^{-2} sum_{i,j} M1_ij for every area; optionally also the x_ij'Q x_ij-weighted sums.

    Areas with equal out-of-sample counts are evaluated as one batch; large
    areas are streamed over row blocks.
    """
    _check_form(form)
    if Q is None:
        Q = assemble_Qs(theta, layout)
    plain = np.zeros(layout.D)
    weighted = np.zeros(layout.D)
    m_all = np.array([a.X_r.shape[0] for a in layout.areas])
    for m in np.unique(m_all):
        if m == 0:
            continue
        ds = np.flatnonzero(m_all == m)
        step = max(1, _CHUNK * _CHUNK // (m * m))
        for lo in range(0, ds.size, step):
            grp = ds[lo:lo + step]
            Xr = np.stack([layout.areas[d].X_r for d in grp])
            for r0 in range(0, m, _CHUNK):
                rows = np.arange(r0, min(r0 + _CHUNK, m))
                same = rows[:, None] == np.arange(m)[None, :]
                blk = _m1_block(beta, theta, layout.n_d[grp], Xr[:, rows], Xr, Q, layout.xbar[grp], same, form)
                plain[grp] += blk.sum(axis=(1, 2))
                if weight_xqx:
                    weighted[grp] += (blk * _xqx(Q, Xr[:, rows], Xr)).sum(axis=(1, 2))
    N2 = layout.N_d.astype(float) ** 2
    if weight_xqx:
        return plain / N2, weighted / N2
    return plain / N2


def m1_unit_diagonal(beta, theta, layout: PopulationLayout, form: str = "derived",
                     Q: np.ndarray | None = None) -> np.ndarray:
    """M1_ii for every out-of-sample unit, stacked area by area."""
    _check_form(form)
    if Q is None:
        Q = assemble_Qs(theta, layout)
    m_all = np.array([a.X_r.shape[0] for a in layout.areas])
    if m_all.sum() == 0:
        return np.zeros(0)
    X = np.vstack([a.X_r for a in layout.areas])
    area = np.repeat(np.arange(layout.D), m_all)
    xbar = layout.xbar[area]
    # unit i paired with itself: a batch of 1 x 1 blocks
    val = _m1_block(beta, theta, layout.n_d[area], X[:, None, :], X[:, None, :], Q, xbar,
                    np.ones((1, 1), bool), form)
    return val[:, 0, 0]
