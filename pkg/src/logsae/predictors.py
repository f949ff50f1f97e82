"""Best and empirical best predictors of out-of-sample values w = exp(y) and of area means."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ml_fit import FitResult, wls_beta
from .model_core import AreaFrame, PopulationLayout, _theta_pair, gamma_alpha

ALPHA_MODES = ("full", "no_sigma_e")


@dataclass(frozen=True)
class UnitPrediction:
    area_id: object
    unit_index: int
    w_tilde: float
    y_tilde: float
    stage: str


@dataclass(frozen=True)
class AreaPrediction:
    area_id: object
    tau_hat: float
    sample_sum: float
    oos_sum: float
    stage: str


@dataclass(frozen=True)
class Predictions:
    """All out-of-sample unit predictions plus the derived area means."""

    stage: str
    beta: np.ndarray
    y_tilde: tuple  # per area, log-scale point predictors for the rows of X_r
    w_tilde: tuple  # per area, original-scale predictors
    areas: tuple  # AreaPrediction per area

    def units(self, layout: PopulationLayout):
        for a, ys, ws in zip(layout.areas, self.y_tilde, self.w_tilde):
            for i, (y, w) in enumerate(zip(ys, ws)):
                yield UnitPrediction(a.area_id, i, float(w), float(y), self.stage)

    @property
    def tau(self) -> np.ndarray:
        return np.array([a.tau_hat for a in self.areas])


def _area_log_predictor(beta, theta, area: AreaFrame, y_s: np.ndarray, alpha_mode: str = "full"):
    ga = gamma_alpha(theta, area.n_d)
    g, a = float(ga.gamma), float(ga.alpha)
    if alpha_mode == "no_sigma_e":
        a -= 0.5 * _theta_pair(theta)[1]
    elif alpha_mode != "full":
        raise ValueError(f"alpha_mode must be one of {ALPHA_MODES}, got {alpha_mode!r}")
    resid_mean = float(np.mean(y_s) - area.X_s.mean(axis=0) @ beta)
    y_t = area.X_r @ beta + g * resid_mean
    return y_t, y_t + a


def best_predict_unit(beta, theta, area: AreaFrame, i: int, y_s: np.ndarray | None = None, stage: str = "BP") -> UnitPrediction:
    """w~_di = exp(x_di'beta + gamma_d(ybar_ds - xbar_ds'beta) + alpha_d) for out-of-sample unit i."""
    if not 0 <= i < area.X_r.shape[0]:
        raise IndexError(f"unit index {i} out of range for area {area.area_id!r} with {area.X_r.shape[0]} out-of-sample units")
    y_s = area.y_s if y_s is None else y_s
    y_t, log_w = _area_log_predictor(np.asarray(beta, float), theta, area, y_s)
    return UnitPrediction(area.area_id, i, float(np.exp(log_w[i])), float(y_t[i]), stage)


def best_predict_area(beta, theta, area: AreaFrame, w_s: np.ndarray, y_s: np.ndarray | None = None, stage: str = "BP") -> AreaPrediction:
    y_s = area.y_s if y_s is None else y_s
    _, log_w = _area_log_predictor(np.asarray(beta, float), theta, area, y_s)
    sample_sum = float(np.sum(w_s))
    oos_sum = float(np.sum(np.exp(log_w)))
    return AreaPrediction(area.area_id, (sample_sum + oos_sum) / area.N_d, sample_sum, oos_sum, stage)


def predict_all(beta, theta, layout: PopulationLayout, y_s: np.ndarray | None = None,
                w_s: np.ndarray | None = None, stage: str = "BP", alpha_mode: str = "full") -> Predictions:
    """Unit and area-mean predictors; ``alpha_mode="no_sigma_e"`` drops sigma_e^2/2 from alpha_d."""
    beta = np.asarray(beta, dtype=float)
    y_s = layout.y_s if y_s is None else np.asarray(y_s, dtype=float)
    w_s = np.exp(y_s) if w_s is None else np.asarray(w_s, dtype=float)
    ys, ws, ap = [], [], []
    for a, yd, wd in zip(layout.areas, np.split(y_s, layout.starts[1:]), np.split(w_s, layout.starts[1:])):
        y_t, log_w = _area_log_predictor(beta, theta, a, yd, alpha_mode)
        w_t = np.exp(log_w)
        ys.append(y_t)
        ws.append(w_t)
        s_sum, o_sum = float(np.sum(wd)), float(np.sum(w_t))
        ap.append(AreaPrediction(a.area_id, (s_sum + o_sum) / a.N_d, s_sum, o_sum, stage))
    return Predictions(stage, beta, tuple(ys), tuple(ws), tuple(ap))


def eb1_predict(theta, layout: PopulationLayout, y_s: np.ndarray | None = None, w_s: np.ndarray | None = None) -> Predictions:
    """First stage: beta replaced by its WLS estimate at the given theta."""
    y_s = layout.y_s if y_s is None else np.asarray(y_s, dtype=float)
    return predict_all(wls_beta(theta, layout, y_s), theta, layout, y_s, w_s, stage="EB1")


def eb2_predict(fit: FitResult, layout: PopulationLayout, y_s: np.ndarray | None = None, w_s: np.ndarray | None = None) -> Predictions:
    """Second stage: both beta and theta replaced by their ML estimates."""
    return predict_all(fit.beta_hat, fit.theta_hat, layout, y_s, w_s, stage="EB2")


def linear_weights(theta, layout: PopulationLayout, area_pos: int, x: np.ndarray) -> np.ndarray:
    """b with y^_di = b'y_s for the first-stage log predictor at covariate row x (dense, n-vector).

    b = V^{-1} X Q x + su2 P Z m_d, written here through the WLS weights so it
    can be checked against a dense construction.
    """
    from .model_core import assemble_Qs, vinv_apply

    Q = assemble_Qs(theta, layout)
    g = float(gamma_alpha(theta, layout.n_d[area_pos]).gamma)
    W = vinv_apply(theta, layout, layout.X) @ Q  # n x p, beta~ = W' y
    xbar = layout.xbar[area_pos]
    ind = (layout.area_index == area_pos).astype(float) / layout.n_d[area_pos]
    return W @ (x - g * xbar) + g * ind
