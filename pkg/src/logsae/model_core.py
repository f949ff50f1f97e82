"""Data layout and block-structured covariance algebra for the nested-error model.

    y_di = x_di' beta + u_d + e_di,   u_d ~ N(0, su2),   e_di ~ N(0, se2)

Every sample block V_d = su2 * 11' + se2 * I is a polynomial in the all-ones
matrix J, so V_d^{-1}, Delta_1 = J and Delta_2 = I commute. Each such block acts
on two eigenspaces: the span of 1 (eigenvalue kappa_d = se2 + n_d su2 for V_d)
and its orthogonal complement (eigenvalue se2). Products of these operators
are tracked by their two eigenvalues per area, which turns all traces into
O(D p^2) sums.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class ParameterSpaceError(ValueError):
    """Variance components outside the parameter space."""


class RankDeficiencyError(np.linalg.LinAlgError):
    """X_s' V_s^{-1} X_s is singular."""


@dataclass(frozen=True)
class Theta:
    """Variance components (sigma_u^2, sigma_e^2)."""

    sigma_u2: float
    sigma_e2: float

    def __post_init__(self):
        su2, se2 = float(self.sigma_u2), float(self.sigma_e2)
        if not (math.isfinite(su2) and math.isfinite(se2)):
            raise ParameterSpaceError(f"non-finite variance components ({su2}, {se2})")
        if se2 <= 0.0:
            raise ParameterSpaceError(f"sigma_e2 must be > 0, got {se2}")
        if su2 < 0.0:
            raise ParameterSpaceError(f"sigma_u2 must be >= 0, got {su2}")
        object.__setattr__(self, "sigma_u2", su2)
        object.__setattr__(self, "sigma_e2", se2)

    @classmethod
    def from_array(cls, a) -> "Theta":
        return cls(float(a[0]), float(a[1]))

    def as_array(self) -> np.ndarray:
        return np.array([self.sigma_u2, self.sigma_e2])


@dataclass(frozen=True)
class BlockGamma:
    gamma: np.ndarray
    alpha: np.ndarray


@dataclass(frozen=True, eq=False)
class AreaFrame:
    """One area: sampled log-scale responses, sample and out-of-sample covariates."""

    area_id: object
    X_s: np.ndarray
    X_r: np.ndarray
    y_s: np.ndarray | None = None
    N_d: int | None = None

    def __post_init__(self):
        X_s = np.atleast_2d(np.asarray(self.X_s, dtype=float))
        X_r = np.asarray(self.X_r, dtype=float)
        if X_r.size == 0:
            X_r = X_r.reshape(0, X_s.shape[1])
        X_r = np.atleast_2d(X_r)
        if X_s.shape[0] < 1:
            raise ValueError(f"area {self.area_id!r}: needs at least one sampled unit")
        if X_r.shape[1] != X_s.shape[1]:
            raise ValueError(
                f"area {self.area_id!r}: X_s has {X_s.shape[1]} columns, X_r has {X_r.shape[1]}"
            )
        N_d = X_s.shape[0] + X_r.shape[0] if self.N_d is None else int(self.N_d)
        if N_d != X_s.shape[0] + X_r.shape[0]:
            raise ValueError(
                f"area {self.area_id!r}: N_d={N_d} but n_d + rows(X_r) = {X_s.shape[0] + X_r.shape[0]}"
            )
        y_s = self.y_s
        if y_s is not None:
            y_s = np.asarray(y_s, dtype=float).ravel()
            if y_s.shape[0] != X_s.shape[0]:
                raise ValueError(f"area {self.area_id!r}: y_s length {y_s.shape[0]} != n_d {X_s.shape[0]}")
        object.__setattr__(self, "X_s", X_s)
        object.__setattr__(self, "X_r", X_r)
        object.__setattr__(self, "y_s", y_s)
        object.__setattr__(self, "N_d", N_d)

    @property
    def n_d(self) -> int:
        return self.X_s.shape[0]

    @property
    def p(self) -> int:
        return self.X_s.shape[1]


@dataclass(frozen=True, eq=False)
class PopulationLayout:
    """Ordered areas plus stacked per-area summaries used by the structured algebra."""

    areas: tuple
    X: np.ndarray = field(init=False, repr=False)
    n_d: np.ndarray = field(init=False, repr=False)
    N_d: np.ndarray = field(init=False, repr=False)
    starts: np.ndarray = field(init=False, repr=False)
    area_index: np.ndarray = field(init=False, repr=False)
    xbar: np.ndarray = field(init=False, repr=False)
    between: np.ndarray = field(init=False, repr=False)
    within: np.ndarray = field(init=False, repr=False)

    def __init__(self, areas: Sequence[AreaFrame]):
        areas = tuple(areas)
        if len(areas) < 2:
            raise ValueError("need at least two areas to identify the variance components")
        p = areas[0].p
        for a in areas:
            if a.p != p:
                raise ValueError(f"area {a.area_id!r} has {a.p} covariates, expected {p}")
        object.__setattr__(self, "areas", areas)
        n_d = np.array([a.n_d for a in areas])
        X = np.vstack([a.X_s for a in areas])
        starts = np.concatenate([[0], np.cumsum(n_d)[:-1]])
        xbar = np.array([a.X_s.mean(axis=0) for a in areas])
        # n x̄ x̄' and X'X - n x̄ x̄' per area: the two eigenspace projections of X_d
        between = n_d[:, None, None] * xbar[:, :, None] * xbar[:, None, :]
        within = np.array([a.X_s.T @ a.X_s for a in areas]) - between
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "n_d", n_d)
        object.__setattr__(self, "N_d", np.array([a.N_d for a in areas]))
        object.__setattr__(self, "starts", starts)
        object.__setattr__(self, "area_index", np.repeat(np.arange(len(areas)), n_d))
        object.__setattr__(self, "xbar", xbar)
        object.__setattr__(self, "between", between)
        object.__setattr__(self, "within", within)

    @property
    def D(self) -> int:
        return len(self.areas)

    @property
    def n(self) -> int:
        return int(self.n_d.sum())

    @property
    def N(self) -> int:
        return int(self.N_d.sum())

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def y_s(self) -> np.ndarray:
        if any(a.y_s is None for a in self.areas):
            raise ValueError("layout carries no sample responses")
        return np.concatenate([a.y_s for a in self.areas])

    def block_sums(self, v: np.ndarray) -> np.ndarray:
        """Per-area sums of an n-vector (or of the rows of an n x k array)."""
        return np.add.reduceat(v, self.starts, axis=0)

    def with_y(self, y_s: np.ndarray) -> "PopulationLayout":
        y_s = np.asarray(y_s, dtype=float)
        parts = np.split(y_s, self.starts[1:])
        return PopulationLayout(
            [AreaFrame(a.area_id, a.X_s, a.X_r, y, a.N_d) for a, y in zip(self.areas, parts)]
        )

    def replicate(self, times: int) -> "PopulationLayout":
        """Design duplication D -> times*D (same covariates, fresh area labels)."""
        return PopulationLayout(
            [
                AreaFrame((k, a.area_id), a.X_s, a.X_r, a.y_s, a.N_d)
                for k in range(times)
                for a in self.areas
            ]
        )


def _theta_pair(theta) -> tuple[float, float]:
    if isinstance(theta, Theta):
        return theta.sigma_u2, theta.sigma_e2
    th = Theta(theta[0], theta[1])
    return th.sigma_u2, th.sigma_e2


def gamma_alpha(theta, n_d) -> BlockGamma:
    """Shrinkage gamma_d = su2/(su2 + se2/n_d) and correction alpha_d = (su2(1-gamma_d) + se2)/2."""
    su2, se2 = _theta_pair(theta)
    n_d = np.asarray(n_d, dtype=float)
    if np.any(n_d < 1):
        raise ValueError("n_d must be >= 1")
    kappa = se2 + n_d * su2
    gamma = n_d * su2 / kappa
    # su2 * (1 - gamma) = su2 * se2 / kappa, without cancellation
    alpha = 0.5 * (su2 * se2 / kappa + se2)
    return BlockGamma(gamma, alpha)


def block_inverse_apply(theta, n_d: int, v: np.ndarray) -> np.ndarray:
    """V_d^{-1} v via the rank-one formula se2^{-1}(I - (gamma_d/n_d) 11')."""
    su2, se2 = _theta_pair(theta)
    v = np.asarray(v, dtype=float)
    if v.shape[0] != n_d:
        raise ValueError(f"vector length {v.shape[0]} != n_d {n_d}")
    gamma = n_d * su2 / (se2 + n_d * su2)
    return (v - (gamma / n_d) * v.sum(axis=0)) / se2


def vinv_apply(theta, layout: PopulationLayout, v: np.ndarray) -> np.ndarray:
    su2, se2 = _theta_pair(theta)
    v = np.asarray(v, dtype=float)
    if v.shape[0] != layout.n:
        raise ValueError(f"vector length {v.shape[0]} != n {layout.n}")
    g = gamma_alpha((su2, se2), layout.n_d).gamma
    means = layout.block_sums(v) / (layout.n_d if v.ndim == 1 else layout.n_d[:, None])
    shift = g if v.ndim == 1 else g[:, None]
    return (v - (shift * means)[layout.area_index]) / se2


def xt_vinv(theta, layout: PopulationLayout, v: np.ndarray) -> np.ndarray:
    return layout.X.T @ vinv_apply(theta, layout, v)


def information_matrix(theta, layout: PopulationLayout) -> np.ndarray:
    """X_s' V_s^{-1} X_s = sum_d se2^{-1}(X_d'X_d - gamma_d n_d x̄_d x̄_d')."""
    su2, se2 = _theta_pair(theta)
    kappa = se2 + layout.n_d * su2
    return np.einsum("d,dij->ij", 1.0 / kappa, layout.between) + layout.within.sum(axis=0) / se2


def assemble_Qs(theta, layout: PopulationLayout) -> np.ndarray:
    """Q_s = (X_s' V_s^{-1} X_s)^{-1}, raising on a singular design."""
    M = information_matrix(theta, layout)
    w, U = np.linalg.eigh(M)
    tol = max(M.shape) * np.finfo(float).eps * max(w.max(), 1.0)
    bad = np.flatnonzero(w <= tol)
    if bad.size:
        col = int(np.argmax(np.abs(U[:, bad[0]])))
        raise RankDeficiencyError(
            f"X_s' V_s^-1 X_s is singular (rank {M.shape[0] - bad.size} of {M.shape[0]}); "
            f"null direction loads mostly on covariate column {col}"
        )
    return (U / w) @ U.T


def apply_Ps(theta, layout: PopulationLayout, v: np.ndarray, Q: np.ndarray | None = None) -> np.ndarray:
    """P_s v = V^{-1} v - V^{-1} X Q X' V^{-1} v."""
    if Q is None:
        Q = assemble_Qs(theta, layout)
    vv = vinv_apply(theta, layout, v)
    corr = layout.X @ (Q @ (layout.X.T @ vv))
    return vv - vinv_apply(theta, layout, corr)


def delta_matrix_apply(h: int, layout: PopulationLayout, v: np.ndarray) -> np.ndarray:
    """Delta_1 v = Z Z' v (block sums replicated), Delta_2 v = v."""
    v = np.asarray(v, dtype=float)
    if v.shape[0] != layout.n:
        raise ValueError(f"vector length {v.shape[0]} != n {layout.n}")
    if h == 1:
        return layout.block_sums(v)[layout.area_index]
    if h == 2:
        return v.copy()
    raise ValueError(f"h must be 1 or 2, got {h}")


def log_det_V(theta, layout: PopulationLayout) -> float:
    su2, se2 = _theta_pair(theta)
    n_d = layout.n_d
    return float(np.sum((n_d - 1) * math.log(se2) + np.log(se2 + n_d * su2)))


# ---------------------------------------------------------------------------
# Spectral trace engine
# ---------------------------------------------------------------------------

def _delta_eigs(h: int, n_d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues of Delta_h on (span 1, complement)."""
    if h == 1:
        return n_d.astype(float), np.zeros(n_d.shape)
    if h == 2:
        return np.ones(n_d.shape), np.ones(n_d.shape)
    raise ValueError(f"h must be 1 or 2, got {h}")


def _word_eigs(theta, n_d, word, n_vinv: int):
    su2, se2 = _theta_pair(theta)
    e1 = (se2 + n_d * su2) ** (-float(n_vinv))
    e0 = np.full(n_d.shape, se2 ** (-float(n_vinv)))
    for h in word:
        d1, d0 = _delta_eigs(h, n_d)
        e1 = e1 * d1
        e0 = e0 * d0
    return e1, e0


def vinv_trace(theta, layout: PopulationLayout, word: Sequence[int]) -> float:
    """tr(V^{-1} Delta_{w1} V^{-1} Delta_{w2} ...) over the whole sample."""
    e1, e0 = _word_eigs(theta, layout.n_d, word, len(word))
    return float(np.sum(e1 + (layout.n_d - 1) * e0))


def segment_matrix(theta, layout: PopulationLayout, word: Sequence[int]) -> np.ndarray:
    """X' V^{-1} Delta_{w1} V^{-1} ... Delta_{wk} V^{-1} X."""
    e1, e0 = _word_eigs(theta, layout.n_d, word, len(word) + 1)
    return np.einsum("d,dij->ij", e1, layout.between) + np.einsum("d,dij->ij", e0, layout.within)


def p_trace(theta, layout: PopulationLayout, word: Sequence[int], Q: np.ndarray | None = None) -> float:
    """tr(P Delta_{w1} P Delta_{w2} ... P Delta_{wm}) by expanding each P.

    Every P = V^{-1} - V^{-1} X Q X' V^{-1}; choosing the low-rank part at a set of
    positions cuts the cyclic word into segments, each of which is a p x p
    segment_matrix.
    """
    word = tuple(word)
    m = len(word)
    if Q is None:
        Q = assemble_Qs(theta, layout)
    total = vinv_trace(theta, layout, word)
    cache: dict[tuple, np.ndarray] = {}
    for k in range(1, m + 1):
        for pos in itertools.combinations(range(m), k):
            prod = np.eye(Q.shape[0])
            for a in range(k):
                start, stop = pos[a], pos[(a + 1) % k]
                seg = tuple(word[(start + t) % m] for t in range(((stop - start - 1) % m) + 1))
                if seg not in cache:
                    cache[seg] = segment_matrix(theta, layout, seg)
                prod = prod @ Q @ cache[seg]
            total += (-1) ** k * float(np.trace(prod))
    return total


# ---------------------------------------------------------------------------
# Dense materialization (tests and small-instance oracles only)
# ---------------------------------------------------------------------------

def dense_Z(layout: PopulationLayout) -> np.ndarray:
    Z = np.zeros((layout.n, layout.D))
    Z[np.arange(layout.n), layout.area_index] = 1.0
    return Z


def dense_V(theta, layout: PopulationLayout) -> np.ndarray:
    su2, se2 = _theta_pair(theta)
    Z = dense_Z(layout)
    return su2 * Z @ Z.T + se2 * np.eye(layout.n)


def dense_delta(h: int, layout: PopulationLayout) -> np.ndarray:
    if h == 1:
        Z = dense_Z(layout)
        return Z @ Z.T
    return np.eye(layout.n)


def dense_P(theta, layout: PopulationLayout) -> np.ndarray:
    Vi = np.linalg.inv(dense_V(theta, layout))
    X = layout.X
    Q = np.linalg.inv(X.T @ Vi @ X)
    return Vi - Vi @ X @ Q @ X.T @ Vi
