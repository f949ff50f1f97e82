"""Maximum likelihood for (sigma_u^2, sigma_e^2) by Fisher scoring on the beta-profiled likelihood."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .model_core import (
    PopulationLayout,
    Theta,
    apply_Ps,
    assemble_Qs,
    delta_matrix_apply,
    log_det_V,
    p_trace,
    vinv_apply,
    vinv_trace,
)

log = logging.getLogger(__name__)


class NonConvergenceError(RuntimeError):
    """Fisher scoring hit max_iter; carries the last iterate and step norm."""

    def __init__(self, message: str, theta: np.ndarray, grad_norm: float, iterations: int):
        super().__init__(message)
        self.theta = theta
        self.grad_norm = grad_norm
        self.iterations = iterations


@dataclass(frozen=True)
class ScoreState:
    s: np.ndarray
    H: np.ndarray
    F: np.ndarray
    nu: np.ndarray


@dataclass(frozen=True)
class FitResult:
    beta_hat: np.ndarray
    theta_hat: Theta
    fisher_at_hat: np.ndarray
    loglik: float
    iterations: int
    converged: bool
    boundary_hit: bool
    step_norm: float = 0.0


@dataclass(frozen=True)
class FitOptions:
    max_iter: int = 100
    tol: float = 1e-8
    theta_init: Theta | None = None
    max_halvings: int = 40


def wls_beta(theta, layout: PopulationLayout, y_s: np.ndarray, Q: np.ndarray | None = None) -> np.ndarray:
    """beta~(theta) = Q_s X_s' V_s^{-1} y_s."""
    if Q is None:
        Q = assemble_Qs(theta, layout)
    return Q @ (layout.X.T @ vinv_apply(theta, layout, y_s))


def penalized_loglik(theta, layout: PopulationLayout, y_s: np.ndarray, Q: np.ndarray | None = None) -> float:
    """-(log|V_s| + y_s' P_s y_s)/2."""
    if Q is None:
        Q = assemble_Qs(theta, layout)
    vy = vinv_apply(theta, layout, y_s)
    b = layout.X.T @ vy
    quad = float(y_s @ vy - b @ Q @ b)
    return -0.5 * (log_det_V(theta, layout) + quad)


def fisher_information(theta, layout: PopulationLayout, Q: np.ndarray | None = None) -> np.ndarray:
    """Expected negative Hessian: tr(P D_h P D_l) - tr(V^-1 D_h V^-1 D_l)/2."""
    if Q is None:
        Q = assemble_Qs(theta, layout)
    F = np.empty((2, 2))
    for h in (1, 2):
        for l in (h, 2):
            F[h - 1, l - 1] = F[l - 1, h - 1] = p_trace(theta, layout, (h, l), Q) - 0.5 * vinv_trace(
                theta, layout, (h, l)
            )
    return F


def score_bias(theta, layout: PopulationLayout, Q: np.ndarray | None = None) -> np.ndarray:
    """nu_h = (tr(P D_h) - tr(V^-1 D_h))/2, the mean of the score."""
    if Q is None:
        Q = assemble_Qs(theta, layout)
    return np.array(
        [0.5 * (p_trace(theta, layout, (h,), Q) - vinv_trace(theta, layout, (h,))) for h in (1, 2)]
    )


def score(theta, layout: PopulationLayout, y_s: np.ndarray, Q: np.ndarray | None = None) -> np.ndarray:
    r = apply_Ps(theta, layout, y_s, Q)
    sums = layout.block_sums(r)
    q = np.array([sums @ sums, r @ r])
    tr = np.array([vinv_trace(theta, layout, (1,)), vinv_trace(theta, layout, (2,))])
    return 0.5 * (q - tr)


def score_hessian_fisher(theta, layout: PopulationLayout, y_s: np.ndarray) -> ScoreState:
    Q = assemble_Qs(theta, layout)
    r = apply_Ps(theta, layout, y_s, Q)
    dr = [delta_matrix_apply(1, layout, r), r]
    pdr = [apply_Ps(theta, layout, v, Q) for v in dr]
    s = np.array([0.5 * (dr[h] @ r - vinv_trace(theta, layout, (h + 1,))) for h in range(2)])
    H = np.empty((2, 2))
    for h in range(2):
        for l in range(2):
            H[h, l] = 0.5 * vinv_trace(theta, layout, (h + 1, l + 1)) - dr[h] @ pdr[l]
    H = 0.5 * (H + H.T)
    return ScoreState(s=s, H=H, F=fisher_information(theta, layout, Q), nu=score_bias(theta, layout, Q))


def moment_start(layout: PopulationLayout, y_s: np.ndarray) -> Theta:
    """ANOVA-type starting values; falls back to (s2_OLS/2, s2_OLS/2)."""
    X, n, D, p = layout.X, layout.n, layout.D, layout.p
    beta_ols, *_ = np.linalg.lstsq(X, y_s, rcond=None)
    res = y_s - X @ beta_ols
    sse = float(res @ res)
    s2_ols = sse / max(n - p, 1)
    try:
        idx = layout.area_index
        yc = y_s - (layout.block_sums(y_s) / layout.n_d)[idx]
        Xc = X - (layout.block_sums(X) / layout.n_d[:, None])[idx]
        rank_w = np.linalg.matrix_rank(Xc) if Xc.any() else 0
        dof = n - D - rank_w
        if dof <= 0:
            raise ValueError("no within-area degrees of freedom")
        bw, *_ = np.linalg.lstsq(Xc, yc, rcond=None) if rank_w else (np.zeros(p),)
        rw = yc - Xc @ bw
        se2 = float(rw @ rw) / dof
        XtX_inv = np.linalg.pinv(X.T @ X)
        ZtX = layout.block_sums(X)
        denom = n - float(np.trace(XtX_inv @ ZtX.T @ ZtX))
        su2 = (sse - (n - p) * se2) / denom
        if not (np.isfinite(se2) and se2 > 0 and np.isfinite(su2)):
            raise ValueError("degenerate moment estimates")
        return Theta(max(su2, 1e-3 * se2), se2)
    except (ValueError, np.linalg.LinAlgError):
        s2 = s2_ols if s2_ols > 0 else 1.0
        return Theta(s2 / 2, s2 / 2)


def fit_ml(layout: PopulationLayout, y_s: np.ndarray | None = None, options: FitOptions | None = None) -> FitResult:
    """Fisher scoring with step-halving and sigma_u2 projected onto [0, inf).

    At sigma_u2 = 0 with a scoring direction pointing below the boundary, the
    step is taken in sigma_e2 alone (active-set rule), so the iteration
    converges to the constrained maximum.
    """
    opts = options or FitOptions()
    y_s = layout.y_s if y_s is None else np.asarray(y_s, dtype=float)
    assemble_Qs((1.0, 1.0), layout)  # rank check up front
    th = (opts.theta_init or moment_start(layout, y_s)).as_array()
    if th[0] == 0.0:
        th[0] = 1e-3 * th[1]
    ll = penalized_loglik(th, layout, y_s)
    step_norm = np.inf
    for it in range(1, opts.max_iter + 1):
        Q = assemble_Qs(th, layout)
        s = score(th, layout, y_s, Q)
        F = fisher_information(th, layout, Q)
        step = np.linalg.solve(F, s)
        if th[0] == 0.0 and step[0] <= 0.0:
            step = np.array([0.0, s[1] / F[1, 1]])
        step_norm = float(np.linalg.norm(step))
        if step_norm <= opts.tol:
            break
        t = 1.0
        for _ in range(opts.max_halvings):
            cand = th + t * step
            if cand[0] < 0.0:
                cand[0] = 0.0
            if cand[1] > 0.0:
                ll_new = penalized_loglik(cand, layout, y_s)
                if ll_new >= ll - 1e-12 * max(1.0, abs(ll)):
                    break
            t *= 0.5
        else:
            # no ascent available along the scoring direction: stationary to working precision
            step_norm = float(np.linalg.norm(t * step))
            break
        moved = float(np.linalg.norm(cand - th))
        th, ll = cand, ll_new
        if moved <= opts.tol:
            step_norm = moved
            break
    else:
        raise NonConvergenceError(
            f"Fisher scoring did not converge in {opts.max_iter} iterations "
            f"(last theta={th.tolist()}, |F^-1 s|={step_norm:.3g})",
            theta=th.copy(),
            grad_norm=step_norm,
            iterations=opts.max_iter,
        )
    theta_hat = Theta(th[0], th[1])
    boundary = bool(th[0] == 0.0)
    Q = assemble_Qs(theta_hat, layout)
    if boundary:
        log.info("sigma_u2 estimate on the boundary (0)")
    return FitResult(
        beta_hat=wls_beta(theta_hat, layout, y_s, Q),
        theta_hat=theta_hat,
        fisher_at_hat=fisher_information(theta_hat, layout, Q),
        loglik=penalized_loglik(theta_hat, layout, y_s, Q),
        iterations=it,
        converged=True,
        boundary_hit=boundary,
        step_norm=step_norm,
    )
