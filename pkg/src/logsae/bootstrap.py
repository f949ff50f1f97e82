"""Parametric bootstrap MSE/MCPE of second-stage EB predictors.

Each replicate b draws a full population from the fitted model with its own
PCG64 stream, seeded by SeedSequence(seed, spawn_key=(b,)). The sampled
positions form the bootstrap sample, the model is refitted (warm-started at
the original estimates) and the squared error against the bootstrap truth is
recorded. Per-replicate errors are reduced in replicate order with math.fsum,
so the report is bit-identical for any worker count.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .ml_fit import FitOptions, FitResult, fit_ml
from .model_core import PopulationLayout, _theta_pair
from .predictors import ALPHA_MODES, predict_all
from .sim_oracle import FIT_ERRORS, default_workers

log = logging.getLogger(__name__)

TARGETS = ("area_mse", "unit_mse", "pair_mcpe")
UNRELIABLE_FRACTION = 0.05


@dataclass(frozen=True)
class BootstrapConfig:
    B: int = 200
    seed: int = 20240611
    workers: int | None = None  # None: LOGSAE_WORKERS or 1
    target: str = "area_mse"
    alpha: str = "full"  # "no_sigma_e" drops sigma_e^2/2 from the replicate predictor's alpha
    chunk: int = 16

    def __post_init__(self):
        if self.B < 1:
            raise ValueError(f"B must be >= 1, got {self.B}")
        if self.target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}, got {self.target!r}")
        if self.alpha not in ALPHA_MODES:
            raise ValueError(f"alpha must be one of {ALPHA_MODES}, got {self.alpha!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError(f"seed must fit in 64 bits, got {self.seed}")


@dataclass(frozen=True)
class BootstrapReport:
    estimate: np.ndarray  # per area (area_mse), per out-of-sample unit (unit_mse), or a scalar pair value
    se: np.ndarray  # MC standard error of the estimate
    B: int
    failures: int
    seed: int
    target: str
    alpha: str
    failed_replicates: tuple = field(default=())

    @property
    def unreliable(self) -> bool:
        return self.failures >= UNRELIABLE_FRACTION * self.B

    def provenance(self) -> dict:
        return {"B": self.B, "seed": self.seed, "target": self.target, "alpha": self.alpha,
                "failures": self.failures, "unreliable": self.unreliable}


def replicate_rng(seed: int, b: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(int(b),))))


def _population(fit: FitResult, layout: PopulationLayout, rng: np.random.Generator):
    """Bootstrap log-scale values: (y_s, y_r) stacked area by area."""
    su2, se2 = _theta_pair(fit.theta_hat)
    N_d = layout.N_d
    u = rng.standard_normal(layout.D) * math.sqrt(su2)
    e = rng.standard_normal(int(N_d.sum())) * math.sqrt(se2)
    beta = fit.beta_hat
    ys, yr, k = [], [], 0
    for d, a in enumerate(layout.areas):
        ed = e[k:k + a.N_d]
        k += a.N_d
        ys.append(a.X_s @ beta + u[d] + ed[:a.n_d])
        yr.append(a.X_r @ beta + u[d] + ed[a.n_d:])
    return ys, yr


def _replicate(fit: FitResult, layout: PopulationLayout, config: BootstrapConfig, b: int, pair):
    """Errors of one replicate for the configured target; None if the refit fails."""
    ys, yr = _population(fit, layout, replicate_rng(config.seed, b))
    y_s = np.concatenate(ys)
    try:
        fit_b = fit_ml(layout, y_s, FitOptions(theta_init=fit.theta_hat))
    except FIT_ERRORS:
        return None
    pred = predict_all(fit_b.beta_hat, fit_b.theta_hat, layout, y_s, stage="EB2", alpha_mode=config.alpha)
    if config.target == "area_mse":
        tau = np.array([(np.exp(a).sum() + np.exp(r).sum()) / ar.N_d for a, r, ar in zip(ys, yr, layout.areas)])
        return (pred.tau - tau) ** 2
    if config.target == "unit_mse":
        err = np.concatenate(pred.w_tilde) - np.exp(np.concatenate(yr)) if yr else np.zeros(0)
        return err * err
    d, i, j = pair
    w = np.exp(yr[d])
    return np.array([(pred.w_tilde[d][i] - w[i]) * (pred.w_tilde[d][j] - w[j])])


def _chunk_task(fit, layout, config, lo, hi, pair):
    return [_replicate(fit, layout, config, b, pair) for b in range(lo, hi)]


def _run(fit: FitResult, layout: PopulationLayout, config: BootstrapConfig, pair=None) -> BootstrapReport:
    if fit.boundary_hit:
        log.warning("bootstrap from a boundary fit (sigma_u2 = 0)")
    workers = default_workers() if config.workers is None else int(config.workers)
    bounds = [(lo, min(lo + config.chunk, config.B)) for lo in range(0, config.B, config.chunk)]
    if workers > 1 and len(bounds) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(bounds))) as ex:
            futs = [ex.submit(_chunk_task, fit, layout, config, lo, hi, pair) for lo, hi in bounds]
            results = [r for f in futs for r in f.result()]
    else:
        results = [r for lo, hi in bounds for r in _chunk_task(fit, layout, config, lo, hi, pair)]
    failed = tuple(b for b, r in enumerate(results) if r is None)
    ok = [r for r in results if r is not None]
    if not ok:
        raise RuntimeError(f"all {config.B} bootstrap refits failed")
    E = np.vstack(ok)
    R = E.shape[0]
    est = np.array([math.fsum(col) / R for col in E.T])
    if R > 1:
        sq = np.array([math.fsum(c) for c in ((E - est) ** 2).T])
        se = np.sqrt(sq / (R - 1) / R)
    else:
        se = np.full_like(est, np.nan)
    report = BootstrapReport(est, se, config.B, len(failed), int(config.seed), config.target, config.alpha, failed)
    if report.unreliable:
        log.warning("%d of %d bootstrap refits failed; report marked unreliable", len(failed), config.B)
    return report


def bootstrap_mse(fit: FitResult, layout: PopulationLayout, config: BootstrapConfig | None = None) -> BootstrapReport:
    """Bootstrap MSE of the second-stage EB area means (or unit predictors with target="unit_mse")."""
    config = config or BootstrapConfig()
    if config.target == "pair_mcpe":
        raise ValueError("use bootstrap_mcpe_pair for target='pair_mcpe'")
    return _run(fit, layout, config)


def bootstrap_mcpe_pair(fit: FitResult, layout: PopulationLayout, config: BootstrapConfig | None,
                        area: int, i: int, j: int) -> BootstrapReport:
    """Bootstrap MCPE of the EB predictors of out-of-sample units i and j of area position ``area``."""
    config = config or BootstrapConfig()
    m = layout.areas[area].X_r.shape[0]
    if not (0 <= i < m and 0 <= j < m):
        raise IndexError(f"units ({i}, {j}) out of range for {m} out-of-sample units")
    cfg = BootstrapConfig(config.B, config.seed, config.workers, "pair_mcpe", config.alpha, config.chunk)
    return _run(fit, layout, cfg, (area, i, j))
