"""Monte Carlo ground truth for the nested-error lognormal model.

Populations are generated with covariates fixed across replicates. Units
0..n_d-1 of every area form the sample. Replicates are drawn in blocks of
``BLOCK`` from per-block PCG64 streams (SeedSequence children keyed by the
block index), so results do not depend on how blocks are spread over
workers. Block partial sums are merged in block order.
"""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .mcpe_exact import m1_area_sums, mcpe_bp_matrix, mse_bp_area
from .mcpe_second_order import SingularFisherError
from .ml_fit import FitOptions, NonConvergenceError, fit_ml
from .model_core import AreaFrame, PopulationLayout, RankDeficiencyError, Theta, _theta_pair, assemble_Qs, vinv_apply

log = logging.getLogger(__name__)

BLOCK = 1000
PREDICTORS = ("bp", "eb1", "eb2", "direct")
FIT_ERRORS = (NonConvergenceError, SingularFisherError, RankDeficiencyError, np.linalg.LinAlgError, FloatingPointError)


def default_workers() -> int:
    """Worker count from LOGSAE_WORKERS, else 1."""
    try:
        return max(1, int(os.environ.get("LOGSAE_WORKERS", "1")))
    except ValueError:
        return 1


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True, eq=False)
class SimDesign:
    """Population design. ``X`` holds one (N_d x p) covariate matrix per area, sample rows first."""

    X: tuple
    n_d: tuple
    beta: np.ndarray
    theta: Theta
    R: int = 1000
    seed: int = 20240611
    area_ids: tuple | None = None

    def __post_init__(self):
        X = tuple(np.atleast_2d(np.asarray(x, float)) for x in self.X)
        n_d = tuple(int(v) for v in self.n_d)
        if len(X) != len(n_d):
            raise ValueError(f"{len(X)} covariate blocks but {len(n_d)} sample sizes")
        for d, (x, n) in enumerate(zip(X, n_d)):
            if not 1 <= n <= x.shape[0]:
                raise ValueError(f"area {d}: need 1 <= n_d <= N_d, got n_d={n}, N_d={x.shape[0]}")
        th = self.theta if isinstance(self.theta, Theta) else Theta(*self.theta)
        ids = tuple(range(len(X))) if self.area_ids is None else tuple(self.area_ids)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "n_d", n_d)
        object.__setattr__(self, "beta", np.asarray(self.beta, float))
        object.__setattr__(self, "theta", th)
        object.__setattr__(self, "area_ids", ids)

    @property
    def D(self) -> int:
        return len(self.X)

    @property
    def N_d(self) -> np.ndarray:
        return np.array([x.shape[0] for x in self.X])

    def layout(self) -> PopulationLayout:
        return PopulationLayout([AreaFrame(i, x[:n], x[n:]) for i, x, n in zip(self.area_ids, self.X, self.n_d)])

    def replicate(self, times: int) -> "SimDesign":
        """Design duplication D -> times * D."""
        return SimDesign(self.X * times, self.n_d * times, self.beta, self.theta, self.R, self.seed,
                         tuple((k, a) for k in range(times) for a in self.area_ids))

    def with_theta(self, theta) -> "SimDesign":
        return SimDesign(self.X, self.n_d, self.beta, theta, self.R, self.seed, self.area_ids)


def uniform_covariates(N_d: Sequence[int], seed: int, p_extra: int = 1) -> tuple:
    """Intercept plus ``p_extra`` uniform(0, 1) columns per area, from a dedicated stream."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(0,))))
    return tuple(np.column_stack([np.ones(N), rng.uniform(size=(N, p_extra))]) for N in N_d)


def desk_design(D: int = 50, n_d: int = 4, N_d: int = 20, beta=(0.5, 0.2), theta=(0.25, 0.5),
                R: int = 1000, seed: int = 20240611) -> SimDesign:
    return SimDesign(uniform_covariates([N_d] * D, seed), (n_d,) * D, np.asarray(beta, float), Theta(*theta), R, seed)


# --- population generation -------------------------------------------------------------


@dataclass(frozen=True)
class _Flat:
    """Stacked population layout: sample block then out-of-sample block, area-major."""

    Xs: np.ndarray
    Xr: np.ndarray
    idx_s: np.ndarray  # area index per sample unit
    idx_r: np.ndarray
    pop_area: np.ndarray  # area index per population unit (area-major, sample first)
    pos_s: np.ndarray  # population positions of sample units
    pos_r: np.ndarray

    def sum_s(self, a: np.ndarray, D: int) -> np.ndarray:
        """Per-area sums over sample columns of a (b, n) batch."""
        return a @ (self.idx_s[:, None] == np.arange(D)[None, :])

    def sum_r(self, a: np.ndarray, D: int) -> np.ndarray:
        return a @ (self.idx_r[:, None] == np.arange(D)[None, :])


def _flatten(design: SimDesign) -> _Flat:
    Xs = np.vstack([x[:n] for x, n in zip(design.X, design.n_d)])
    Xr_parts = [x[n:] for x, n in zip(design.X, design.n_d)]
    Xr = np.vstack(Xr_parts) if Xr_parts else np.zeros((0, Xs.shape[1]))
    N_d = design.N_d
    n_d = np.array(design.n_d)
    pop_area = np.repeat(np.arange(design.D), N_d)
    offs = np.concatenate([[0], np.cumsum(N_d)[:-1]])
    pos_s = np.concatenate([o + np.arange(n) for o, n in zip(offs, n_d)])
    pos_r = np.concatenate([o + np.arange(n, N) for o, n, N in zip(offs, n_d, N_d)])
    return _Flat(Xs, Xr, np.repeat(np.arange(design.D), n_d), np.repeat(np.arange(design.D), N_d - n_d),
                 pop_area, pos_s, pos_r.astype(int))


def _block_rng(seed: int, block: int, stream: int = 1) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(stream, block))))


def simulate_block(design: SimDesign, block: int, size: int = BLOCK) -> np.ndarray:
    """Log-scale populations for replicates block*BLOCK .. block*BLOCK+size-1, shape (size, N)."""
    su2, se2 = _theta_pair(design.theta)
    rng = _block_rng(design.seed, block)
    X = np.vstack(design.X)
    area = np.repeat(np.arange(design.D), design.N_d)
    u = rng.standard_normal((size, design.D)) * math.sqrt(su2)
    e = rng.standard_normal((size, X.shape[0])) * math.sqrt(se2)
    return (X @ design.beta)[None, :] + u[:, area] + e


@dataclass(frozen=True)
class Population:
    y: tuple  # per area, length N_d, sample first
    w: tuple

    @property
    def tau(self) -> np.ndarray:
        return np.array([float(np.mean(w)) for w in self.w])


def simulate_population(design: SimDesign, replicate_index: int) -> Population:
    b, k = divmod(int(replicate_index), BLOCK)
    y = simulate_block(design, b)[k]
    parts = np.split(y, np.cumsum(design.N_d)[:-1])
    return Population(tuple(parts), tuple(np.exp(p) for p in parts))


# --- predictors on a batch of replicates ---------------------------------------------


def _log_pred(beta_rows: np.ndarray, theta, design: SimDesign, flat: _Flat, ys: np.ndarray) -> np.ndarray:
    """Log-scale out-of-sample predictor plus alpha, batched over rows of ys (b, n)."""
    su2, se2 = _theta_pair(theta)
    n_d = np.array(design.n_d, float)
    kap = se2 + n_d * su2
    g = n_d * su2 / kap
    alpha = 0.5 * (su2 * se2 / kap + se2)
    resid = ys - beta_rows @ flat.Xs.T
    rbar = flat.sum_s(resid, design.D) / n_d
    return beta_rows @ flat.Xr.T + (g * rbar + alpha)[:, flat.idx_r]


def _area_means(design: SimDesign, flat: _Flat, ws: np.ndarray, wr: np.ndarray) -> np.ndarray:
    N = design.N_d.astype(float)
    tot = flat.sum_s(ws, design.D)
    if wr.shape[1]:
        tot = tot + flat.sum_r(wr, design.D)
    return tot / N


@dataclass(frozen=True)
class BatchPredictions:
    w_r: np.ndarray  # (b, N_r) out-of-sample predictions, NaN rows for failed fits
    tau: np.ndarray  # (b, D)


def predict_batch(kind: str, design: SimDesign, flat: _Flat, y: np.ndarray, fit_opts: FitOptions | None = None,
                  layout: PopulationLayout | None = None):
    ys, ws = y[:, flat.pos_s], np.exp(y[:, flat.pos_s])
    b = y.shape[0]
    if kind == "bp":
        wr = np.exp(_log_pred(np.tile(design.beta, (b, 1)), design.theta, design, flat, ys))
    elif kind == "eb1":
        layout = design.layout() if layout is None else layout
        W = vinv_apply(design.theta, layout, layout.X) @ assemble_Qs(design.theta, layout)
        wr = np.exp(_log_pred(ys @ W, design.theta, design, flat, ys))
    elif kind == "eb2":
        layout = design.layout() if layout is None else layout
        wr = np.full((b, flat.Xr.shape[0]), np.nan)
        for r in range(b):
            try:
                fit = fit_ml(layout, ys[r], fit_opts)
            except FIT_ERRORS:
                continue
            wr[r] = np.exp(_log_pred(fit.beta_hat[None, :], fit.theta_hat, design, flat, ys[r:r + 1])[0])
    elif kind == "direct":
        n = np.array(design.n_d, float)
        tau = flat.sum_s(ws, design.D) / n
        return BatchPredictions(np.full((b, flat.Xr.shape[0]), np.nan), tau)
    else:
        raise ValueError(f"predictor must be one of {PREDICTORS}, got {kind!r}")
    return BatchPredictions(wr, _area_means(design, flat, ws, wr))


# --- moment accumulation -------------------------------------------------------------


@dataclass
class Moments:
    """Running sums for per-target means and MC standard errors."""

    count: np.ndarray | int = 0
    s1: dict = field(default_factory=dict)
    s2: dict = field(default_factory=dict)

    def add(self, name: str, values: np.ndarray, valid: np.ndarray) -> None:
        v = np.where(valid.reshape((-1,) + (1,) * (values.ndim - 1)), values, 0.0)
        self.s1[name] = self.s1.get(name, 0.0) + v.sum(axis=0)
        self.s2[name] = self.s2.get(name, 0.0) + (v * v).sum(axis=0)

    def add_sums(self, name: str, s1: np.ndarray, s2: np.ndarray) -> None:
        self.s1[name] = self.s1.get(name, 0.0) + s1
        self.s2[name] = self.s2.get(name, 0.0) + s2

    def merge(self, other: "Moments") -> "Moments":
        out = Moments(self.count + other.count)
        for k in set(self.s1) | set(other.s1):
            out.s1[k] = self.s1.get(k, 0.0) + other.s1.get(k, 0.0)
            out.s2[k] = self.s2.get(k, 0.0) + other.s2.get(k, 0.0)
        return out

    def mean(self, name: str) -> np.ndarray:
        return self.s1[name] / self.count

    def se(self, name: str) -> np.ndarray:
        """s/sqrt(R); equal to the delete-one jackknife SE of a sample mean."""
        R = self.count
        var = (self.s2[name] - self.s1[name] ** 2 / R) / (R - 1)
        return np.sqrt(np.maximum(var, 0.0) / R)


def _run_blocks(task: Callable, design: SimDesign, R: int, workers: int | None, args: tuple = ()) -> tuple[Moments, int]:
    nblocks = -(-R // BLOCK)
    sizes = [min(BLOCK, R - k * BLOCK) for k in range(nblocks)]
    workers = default_workers() if workers is None else workers
    jobs = [(design, k, sizes[k]) + args for k in range(nblocks)]
    if workers > 1 and nblocks > 1:
        with ProcessPoolExecutor(max_workers=min(workers, nblocks)) as ex:
            results = list(ex.map(task, *zip(*jobs)))
    else:
        results = [task(*j) for j in jobs]
    total, failures = Moments(), 0
    for m, f in results:
        total = total.merge(m)
        failures += f
    return total, failures


@dataclass(frozen=True)
class EmpiricalResult:
    """Empirical MSE (area means and units) or MCPE (pairs within areas) with MC SEs."""

    predictor: str
    area_mse: np.ndarray
    area_se: np.ndarray
    unit_mse: np.ndarray | None
    unit_se: np.ndarray | None
    pair_mcpe: tuple | None  # per area, (m x m)
    pair_se: tuple | None
    R: int
    failures: int


def _add_pairs(mom: "Moments", name: str, design: SimDesign, flat: _Flat, a: np.ndarray, c: np.ndarray,
               valid: np.ndarray) -> None:
    """Accumulate within-area products a_i c_j summed over replicates, flattened over areas."""
    a = np.where(valid[:, None], a, 0.0)
    c = np.where(valid[:, None], c, 0.0)
    s1, s2 = [], []
    for d in range(design.D):
        sel = flat.idx_r == d
        ad, cd = a[:, sel], c[:, sel]
        s1.append((ad.T @ cd).ravel())
        s2.append(((ad * ad).T @ (cd * cd)).ravel())
    mom.add_sums(name, np.concatenate(s1), np.concatenate(s2))


def _split_pairs(design: SimDesign, flat_vals: np.ndarray) -> tuple:
    m = design.N_d - np.array(design.n_d)
    parts = np.split(flat_vals, np.cumsum(m * m)[:-1])
    return tuple(p.reshape(k, k) for p, k in zip(parts, m))


def _empirical_task(design, block, size, kind, pairs, fit_opts, conditional=False):
    flat = _flatten(design)
    y = simulate_block(design, block, size)
    pred = predict_batch(kind, design, flat, y, fit_opts)
    if conditional:
        best = predict_batch("bp", design, flat, y)
        tau, w_r = best.tau, best.w_r
    else:
        w = np.exp(y)
        tau = _area_means(design, flat, w[:, flat.pos_s], w[:, flat.pos_r])
        w_r = w[:, flat.pos_r]
    valid = np.all(np.isfinite(pred.tau), axis=1)
    mom = Moments(int(valid.sum()))
    mom.add("area", (pred.tau - tau) ** 2, valid)
    if kind != "direct":
        err = pred.w_r - w_r
        err = np.where(valid[:, None], err, 0.0)
        mom.add("unit", err * err, valid)
        if pairs:
            _add_pairs(mom, "pair", design, flat, err, err, valid)
    return mom, int((~valid).sum())


def empirical_mse(design: SimDesign, predictor: str = "bp", R: int | None = None, pairs: bool = False,
                  workers: int | None = None, fit_opts: FitOptions | None = None,
                  conditional: bool = False) -> EmpiricalResult:
    """Empirical MSE of area-mean and unit predictors (and within-area MCPE if ``pairs``).

    With ``conditional`` the errors are taken against the best predictor and
    the exact best-predictor MCPE is added back. Any predictor p that is a
    function of the sample satisfies MCPE(p_i, p_j) = E(p_i - w~_i)(p_j - w~_j)
    + MCPE(w~_i, w~_j), so the target is unchanged while the heavy-tailed
    noise of w drops out of the MC average.
    """
    if predictor not in PREDICTORS:
        raise ValueError(f"predictor must be one of {PREDICTORS}, got {predictor!r}")
    R = design.R if R is None else int(R)
    if R < 100:
        raise ValueError(f"need R >= 100 replicates, got {R}")
    mom, fails = _run_blocks(_empirical_task, design, R, workers, (predictor, pairs, fit_opts, conditional))
    if fails:
        log.warning("%d of %d replicates failed to fit", fails, R)
    unit = predictor != "direct"
    area, unit_mse, pair = mom.mean("area"), mom.mean("unit") if unit else None, None
    if unit and pairs:
        pair = _split_pairs(design, mom.mean("pair"))
    if conditional:
        areas = design.layout().areas
        bp = [mcpe_bp_matrix(design.beta, design.theta, a) for a in areas]
        area = area + np.array([mse_bp_area(design.beta, design.theta, a) for a in areas])
        if unit:
            unit_mse = unit_mse + np.concatenate([np.diag(b) for b in bp])
        if pair is not None:
            pair = tuple(p + b for p, b in zip(pair, bp))
    return EmpiricalResult(
        predictor,
        area, mom.se("area"),
        unit_mse, mom.se("unit") if unit else None,
        pair if unit and pairs else None,
        _split_pairs(design, mom.se("pair")) if unit and pairs else None,
        mom.count, fails,
    )


# --- second-order decomposition and plug-in bias ---------------------------------------


@dataclass(frozen=True)
class SecondOrderMC:
    """MC expectations of the second-stage decomposition, per area mean and per pair.

    ``m2`` is E(tau^E - tau^)^2 and ``m3`` is E(tau^E - tau^)(tau^ - tau), with
    tau^ the first-stage predictor; pair versions use unit predictors.
    """

    m2_area: np.ndarray
    m2_area_se: np.ndarray
    m3_area: np.ndarray
    m3_area_se: np.ndarray
    mse_area: np.ndarray
    mse_area_se: np.ndarray
    m2_pair: tuple | None
    m3_pair: tuple | None
    m3_pair_se: tuple | None
    m2_pair_se: tuple | None
    R: int
    failures: int


def _second_order_task(design, block, size, pairs, fit_opts, conditional=False):
    flat = _flatten(design)
    layout = design.layout()
    y = simulate_block(design, block, size)
    w = np.exp(y)
    e1 = predict_batch("eb1", design, flat, y, layout=layout)
    e2 = predict_batch("eb2", design, flat, y, fit_opts, layout=layout)
    tau = _area_means(design, flat, w[:, flat.pos_s], w[:, flat.pos_r])
    if conditional:
        best = predict_batch("bp", design, flat, y)
        tgt_tau, tgt_w = best.tau, best.w_r
    else:
        tgt_tau, tgt_w = tau, w[:, flat.pos_r]
    valid = np.all(np.isfinite(e2.tau), axis=1)
    mom = Moments(int(valid.sum()))
    a2 = np.nan_to_num(e2.tau - e1.tau)
    a1 = e1.tau - tgt_tau
    mom.add("m2", a2 * a2, valid)
    mom.add("m3", a2 * a1, valid)
    mom.add("mse", (np.nan_to_num(e2.tau) - tau) ** 2, valid)
    if pairs:
        u2 = np.nan_to_num(e2.w_r - e1.w_r)
        u1 = e1.w_r - tgt_w
        _add_pairs(mom, "m2p", design, flat, u2, u2, valid)
        _add_pairs(mom, "m3p", design, flat, u2, u1, valid)
    return mom, int((~valid).sum())


def second_order_mc(design: SimDesign, R: int | None = None, pairs: bool = False, workers: int | None = None,
                    fit_opts: FitOptions | None = None, conditional: bool = False) -> SecondOrderMC:
    """MC of the second-stage terms.

    With ``conditional`` the crossed term uses the best predictor in place of
    the true value: tau^E - tau^ is a function of the sample and tau~ - tau is
    orthogonal to every such function, so the expectation is unchanged.
    """
    R = design.R if R is None else int(R)
    mom, fails = _run_blocks(_second_order_task, design, R, workers, (pairs, fit_opts, conditional))
    sp = (lambda k: _split_pairs(design, k)) if pairs else (lambda k: None)
    return SecondOrderMC(
        mom.mean("m2"), mom.se("m2"), mom.mean("m3"), mom.se("m3"), mom.mean("mse"), mom.se("mse"),
        sp(mom.mean("m2p")) if pairs else None, sp(mom.mean("m3p")) if pairs else None,
        sp(mom.se("m3p")) if pairs else None, sp(mom.se("m2p")) if pairs else None,
        mom.count, fails,
    )


def _fit_stats_task(design, block, size, form, estimates, fit_opts):
    from .mse_estimation import mse_estimates, unit_mse_estimates

    flat = _flatten(design)
    layout = design.layout()
    y = simulate_block(design, block, size)
    ys = y[:, flat.pos_s]
    base = m1_area_sums(design.beta, design.theta, layout, form)
    D = design.D
    m1_hat = np.zeros((size, D))
    est = np.zeros((size, D))
    bp_est = np.zeros((size, D))
    unit_est = np.zeros((size, flat.Xr.shape[0]))
    th = np.zeros((size, 2))
    valid = np.ones(size, bool)
    for r in range(size):
        try:
            fit = fit_ml(layout, ys[r], fit_opts)
            m1_hat[r] = m1_area_sums(fit.beta_hat, fit.theta_hat, layout, form)
            if estimates:
                ests = mse_estimates(fit, layout.with_y(ys[r]), form)
                est[r] = [e.mse_eb2 for e in ests]
                bp_est[r] = [e.mse_bp for e in ests]
                unit_est[r] = unit_mse_estimates(fit, layout, form)
            th[r] = fit.theta_hat.as_array()
        except FIT_ERRORS:
            valid[r] = False
    mom = Moments(int(valid.sum()))
    mom.add("bias", m1_hat - base, valid)
    mom.add("theta", th, valid)
    if estimates:
        mom.add("est", est, valid)
        mom.add("bp_est", bp_est, valid)
        mom.add("unit_est", unit_est, valid)
    return mom, int((~valid).sum())


@dataclass(frozen=True)
class PlugInMC:
    """MC means over refitted datasets: plug-in bias of area-mean M1 and (optionally) estimator means."""

    m1_bias: np.ndarray
    m1_bias_se: np.ndarray
    theta_mean: np.ndarray
    theta_se: np.ndarray
    mse_eb2_est: np.ndarray | None
    mse_eb2_est_se: np.ndarray | None
    mse_bp_est: np.ndarray | None
    unit_mse_est: np.ndarray | None
    R: int
    failures: int


def plug_in_mc(design: SimDesign, R: int | None = None, form: str = "derived", estimates: bool = False,
               workers: int | None = None, fit_opts: FitOptions | None = None) -> PlugInMC:
    R = design.R if R is None else int(R)
    mom, fails = _run_blocks(_fit_stats_task, design, R, workers, (form, estimates, fit_opts))
    return PlugInMC(
        mom.mean("bias"), mom.se("bias"), mom.mean("theta"), mom.se("theta"),
        mom.mean("est") if estimates else None, mom.se("est") if estimates else None,
        mom.mean("bp_est") if estimates else None, mom.mean("unit_est") if estimates else None,
        mom.count, fails,
    )


# --- direct estimator and census-style study ------------------------------------------


@dataclass(frozen=True)
class DirectEstimate:
    tau_dir: float
    var_dir: float
    cv: float  # percent

    @classmethod
    def from_sample(cls, w_s: np.ndarray, N_d: int) -> "DirectEstimate":
        """Sample mean with the finite-population-corrected variance; var is NaN when n_d = 1 < N_d."""
        w_s = np.asarray(w_s, float)
        n = w_s.size
        tau = float(np.mean(w_s))
        if n == N_d:
            var = 0.0
        elif n < 2:
            var = float("nan")
        else:
            var = (1.0 - n / N_d) * float(np.var(w_s, ddof=1)) / n
        cv = 100.0 * math.sqrt(var) / tau if tau != 0 and np.isfinite(var) else float("nan")
        return cls(tau, var, cv)


@dataclass(frozen=True)
class StudyRow:
    area_id: object
    N_d: int
    n_d: int
    tau_true: float
    tau_dir: float
    cv_dir: float
    tau_eb2: float
    cv_eb2: float
    mse_eb2_boot: float
    relerr_dir: float
    relerr_eb2: float


def census_design(N_d: Sequence[int], beta=(7.5, 0.5), theta=(0.05, 0.3), sample_fraction: float = 0.1,
                  seed: int = 20240611) -> SimDesign:
    """Census-style design with the sample size rounded half up from N_d * fraction (at least 1)."""
    n_d = tuple(max(1, round_half_up(N * sample_fraction)) for N in N_d)
    return SimDesign(uniform_covariates(N_d, seed), n_d, np.asarray(beta, float), Theta(*theta), 1, seed)


def silc_style_study(design: SimDesign, k_shift: float = 0.0, B: int = 200, seed: int | None = None,
                     workers: int | None = None, alpha: str = "full") -> list[StudyRow]:
    """One synthetic census; direct vs second-stage EB area means with CVs (bootstrap CV for EB).

    The census is generated on the model scale and reported on the original
    scale w = exp(y) - k, so y = log(w + k) holds exactly.
    """
    from .bootstrap import BootstrapConfig, bootstrap_mse
    from .predictors import eb2_predict

    if k_shift < 0:
        raise ValueError(f"shift constant must be >= 0, got {k_shift}")
    pop = simulate_population(design, 0)
    layout = PopulationLayout([
        AreaFrame(i, x[:n], x[n:], y[:n]) for i, x, n, y in zip(design.area_ids, design.X, design.n_d, pop.y)
    ])
    fit = fit_ml(layout)
    pred = eb2_predict(fit, layout)
    boot = bootstrap_mse(fit, layout, BootstrapConfig(B=B, seed=design.seed if seed is None else seed,
                                                      workers=workers, alpha=alpha))
    rows = []
    for d, (aid, n, w_model) in enumerate(zip(design.area_ids, design.n_d, pop.w)):
        w = w_model - k_shift
        N = w.size
        tau = float(np.mean(w))
        de = DirectEstimate.from_sample(w[:n], N)
        tau_eb = pred.areas[d].tau_hat - k_shift
        mse = float(boot.estimate[d])
        cv_eb = 100.0 * math.sqrt(max(mse, 0.0)) / tau_eb if tau_eb != 0 else float("nan")
        rows.append(StudyRow(aid, N, n, tau, de.tau_dir, de.cv, tau_eb, cv_eb, mse,
                             (de.tau_dir - tau) / tau, (tau_eb - tau) / tau))
    return rows
