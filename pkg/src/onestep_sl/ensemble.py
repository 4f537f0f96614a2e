"""The one-step ahead sequential Super Learner.

At time ``t`` every learner's snapshot ``theta_{j,t-1}`` is scored on the new slice,
the cumulative empirical risks are updated, a meta-learner picks weights over the
library, and only then are the learners refit on slices ``1..t``. Scoring therefore
never sees a predictor that was fit on the slice it is scored on.

Weights come from one of four meta methods:

* ``discrete``      -- the empirical-risk minimiser (a simplex vertex);
* ``simplex-nnls``  -- least squares over the whole simplex (projected gradient);
* ``convex-grid``   -- exhaustive search over the simplex grid with step ``1/K``;
* ``nnls``          -- nonnegative least squares without the sum-to-one constraint.
"""
from __future__ import annotations

import enum
import itertools
import logging
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.optimize import nnls as _scipy_nnls
from sklearn.base import BaseEstimator

from .core import LossSpec, PanelDataset, RiskLedger, TimeSlice, update_ledger
from .learners import LearnerSpec, initial_predictor, refit

log = logging.getLogger(__name__)

GRID_GUARD = 10**7


class MetaMethod(str, enum.Enum):
    DISCRETE = "discrete"
    SIMPLEX = "simplex-nnls"
    GRID = "convex-grid"
    NNLS = "nnls"


class NoDeclaredRowsError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SimplexWeights:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or w.size == 0:
            raise ValueError("weights must be a non-empty vector")
        if (w < 0).any():
            raise ValueError("simplex weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"simplex weights sum to {w.sum()!r}, not 1")
        w = w / w.sum()
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    def __len__(self):
        return len(self.weights)


@dataclass(frozen=True, eq=False)
class MetaDesign:
    """Declared rows: base-learner predictions ``P`` (n x J) and targets ``y``."""

    P: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if P.ndim != 2 or y.shape != (P.shape[0],):
            raise ValueError("MetaDesign needs P of shape (n, J) and y of shape (n,)")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "y", y)

    @property
    def n_rows(self) -> int:
        return self.P.shape[0]

    @property
    def n_learners(self) -> int:
        return self.P.shape[1]

    @classmethod
    def stack(cls, blocks: Sequence[tuple[np.ndarray, np.ndarray]], n_learners: int) -> "MetaDesign":
        if not blocks:
            return cls(np.zeros((0, n_learners)), np.zeros(0))
        return cls(np.vstack([b[0] for b in blocks]), np.concatenate([b[1] for b in blocks]))

    def quadratic(self):
        """``(G, b, c)`` with mean squared error ``= s'Gs - 2b's + c``."""
        n = self.n_rows
        return self.P.T @ self.P / n, self.P.T @ self.y / n, float(self.y @ self.y) / n

    def objective(self, weights) -> float:
        """Mean squared error of the combination ``P @ weights``."""
        r = self.y - self.P @ np.asarray(weights, dtype=float)
        return float(r @ r) / self.n_rows


# ---------------------------------------------------------------------------
# Selectors
# ---------------------------------------------------------------------------


def discrete_select(ledger: RiskLedger) -> int:
    """Zero-based index of the smallest cumulative empirical risk; ties go to the lowest index."""
    if ledger.times_seen == 0 or not ledger.learner_ids:
        raise ValueError("empty ledger")
    return int(np.argmin(ledger.empirical_risks()))


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based, exact)."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ks = np.arange(1, v.size + 1)
    rho = np.flatnonzero(u - css / ks > 0)[-1]
    tau = css[rho] / (rho + 1.0)
    return np.maximum(v - tau, 0.0)


def _qobj(G, b, c, s):
    return float(s @ G @ s - 2 * b @ s + c)


def _pgd(G, b, c, s0, max_iter=2000, rtol=1e-10):
    s = project_simplex(s0)
    f = _qobj(G, b, c, s)
    step = 1.0 / max(2 * np.linalg.norm(G, 2), 1e-300)
    for _ in range(max_iter):
        g = 2 * (G @ s - b)
        step *= 2.0
        while True:
            cand = project_simplex(s - step * g)
            fc = _qobj(G, b, c, cand)
            # Armijo condition for projected steps
            if fc <= f + g @ (cand - s) + (cand - s) @ (cand - s) / (2 * step) or step < 1e-300:
                break
            step *= 0.5
        decrease = f - fc
        if fc <= f:
            s, f = cand, fc
        if decrease <= rtol * max(abs(f), 1e-300):
            break
    return s, f


def _polish(G, b, c, s, rounds=4):
    """Active-set refinement: solve the equality-constrained QP on the support."""
    f = _qobj(G, b, c, s)
    J = len(s)
    for _ in range(rounds):
        g = 2 * (G @ s - b)
        support = s > 1e-12
        # add the coordinate with the most negative reduced gradient, if any
        lam = g[support].mean() if support.any() else 0.0
        outside = (~support) & (g < lam - 1e-15)
        if outside.any():
            support[np.argmin(np.where(outside, g, np.inf))] = True
        idx = np.flatnonzero(support)
        k = len(idx)
        kkt = np.zeros((k + 1, k + 1))
        kkt[:k, :k] = 2 * G[np.ix_(idx, idx)]
        kkt[:k, k] = 1.0
        kkt[k, :k] = 1.0
        rhs = np.concatenate([2 * b[idx], [1.0]])
        sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0][:k]
        if (sol < 0).any():
            break
        cand = np.zeros(J)
        cand[idx] = sol
        cand /= cand.sum()
        fc = _qobj(G, b, c, cand)
        if fc <= f:
            s, f = cand, fc
        else:
            break
    return s, f


def simplex_kkt_residual(design: MetaDesign, weights) -> float:
    """Smallest directional derivative from ``weights`` toward a simplex vertex.

    Nonnegative (up to rounding) exactly at a minimiser of the convex objective.
    """
    G, b, _ = design.quadratic()
    s = np.asarray(weights, dtype=float)
    g = 2 * (G @ s - b)
    return float(np.min(g - g @ s))


def continuous_select(design: MetaDesign, n_restarts: int = 5, max_iter: int = 2000, seed: int = 0) -> SimplexWeights:
    """Least-squares weights over the whole simplex.

    Projected gradient with backtracking, started from the best single column and
    ``n_restarts`` random Dirichlet points, finished by an active-set polish. The
    vertex start makes the result never worse than the discrete pick.
    """
    if design.n_rows == 0:
        raise NoDeclaredRowsError("no declared observations yet")
    J = design.n_learners
    G, b, c = design.quadratic()
    col_err = np.diag(G) - 2 * b + c
    starts = [np.eye(J)[int(np.argmin(col_err))]]
    rng = np.random.default_rng(seed)
    starts += list(rng.dirichlet(np.ones(J), size=n_restarts))
    best_s, best_f = None, math.inf
    for s0 in starts:
        s, f = _pgd(G, b, c, s0, max_iter=max_iter)
        s, f = _polish(G, b, c, s)
        if f < best_f:
            best_s, best_f = s, f
    return SimplexWeights(best_s / best_s.sum())


def simplex_grid(J: int, K: int) -> np.ndarray:
    """All points of ``{k/K}^J`` summing to one, as rows."""
    if J == 1:
        return np.ones((1, 1))
    rows = []
    for bars in itertools.combinations(range(K + J - 1), J - 1):
        edges = (-1,) + bars + (K + J - 1,)
        rows.append([edges[i + 1] - edges[i] - 1 for i in range(J)])
    return np.array(rows, dtype=float) / K


def convex_grid_select(design: MetaDesign, K: int) -> SimplexWeights:
    """Brute-force minimiser over the discretised simplex with resolution ``1/K``."""
    if K < 1:
        raise ValueError("K must be a positive integer")
    if design.n_rows == 0:
        raise NoDeclaredRowsError("no declared observations yet")
    J = design.n_learners
    if float(K) ** (J - 1) > GRID_GUARD:
        raise ValueError(f"grid of size K^(J-1) = {K}^{J - 1} exceeds {GRID_GUARD}; use continuous_select")
    W = simplex_grid(J, K)
    G, b, c = design.quadratic()
    obj = np.einsum("ij,jk,ik->i", W, G, W) - 2 * W @ b + c
    return SimplexWeights(W[int(np.argmin(obj))])


def nnls_meta(design: MetaDesign) -> np.ndarray:
    """Nonnegative least-squares weights (no sum-to-one constraint)."""
    if design.n_rows == 0:
        raise NoDeclaredRowsError("no declared observations yet")
    w, _ = _scipy_nnls(design.P, design.y, maxiter=50 * max(design.n_learners, 1))
    return w


def nnls_kkt_residual(design: MetaDesign, w) -> float:
    """Max violation of the NNLS optimality conditions, on the mean-squared-error scale."""
    w = np.asarray(w, dtype=float)
    g = 2 * design.P.T @ (design.P @ w - design.y) / design.n_rows
    return float(max(np.max(-np.minimum(g, 0.0)), np.max(np.abs(g[w > 0]), initial=0.0), np.max(-np.minimum(w, 0.0))))


# ---------------------------------------------------------------------------
# Sequential state
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EnsembleState:
    """Everything the Super Learner knows after seeing ``ledger.times_seen`` slices."""

    specs: tuple
    snapshots: tuple
    ledger: RiskLedger
    meta_method: MetaMethod
    outcome_bound: float
    history: tuple = ()
    design_blocks: tuple = ()
    selections: tuple = ()
    weights: tuple = ()
    meta_risks: tuple = ()
    sl_loss_sum: float = 0.0
    grid_K: int = 20
    n_restarts: int = 5
    seed: int = 0

    @property
    def t(self) -> int:
        return self.ledger.times_seen

    @property
    def learner_ids(self) -> tuple:
        return self.ledger.learner_ids

    @property
    def current_weights(self) -> np.ndarray:
        """Weights applied to ``theta_{., t}`` for the next slice (``e_1`` before any data)."""
        if self.weights:
            return np.asarray(self.weights[-1])
        return np.eye(len(self.specs))[0]

    @property
    def sl_empirical_risk(self) -> float:
        """Cumulative empirical risk of the Super Learner's own one-step-ahead predictions."""
        return self.sl_loss_sum / self.t

    def design(self) -> MetaDesign:
        return MetaDesign.stack(self.design_blocks, len(self.specs))

    def predictions(self, slice_: TimeSlice) -> np.ndarray:
        """Base-learner predictions (n_units x J) of the current snapshots; undeclared units get 0."""
        F = slice_.features
        P = np.column_stack([s.predict_features(F) for s in self.snapshots])
        return np.where((slice_.w == 1)[:, None], P, 0.0)

    def predict(self, slice_: TimeSlice) -> np.ndarray:
        """The Super Learner's prediction for ``slice_`` from the current weights and snapshots."""
        P = self.predictions(slice_)
        return np.clip(P @ self.current_weights, 0.0, self.outcome_bound)


def init_state(
    specs: Sequence[LearnerSpec],
    outcome_bound: float,
    meta_method: str | MetaMethod = MetaMethod.DISCRETE,
    grid_K: int = 20,
    n_restarts: int = 5,
    seed: int = 0,
) -> EnsembleState:
    specs = tuple(specs)
    if not specs:
        raise ValueError("the learner library is empty")
    ids = [s.learner_id for s in specs]
    if len(set(ids)) != len(ids):
        raise ValueError("learner ids must be unique")
    return EnsembleState(
        specs=specs,
        snapshots=tuple(initial_predictor(s, outcome_bound) for s in specs),
        ledger=RiskLedger.empty(ids),
        meta_method=MetaMethod(meta_method),
        outcome_bound=float(outcome_bound),
        grid_K=int(grid_K),
        n_restarts=int(n_restarts),
        seed=int(seed),
    )


def _meta_weights(state: EnsembleState, design: MetaDesign, j_hat: int, t: int) -> np.ndarray:
    J = len(state.specs)
    vertex = np.eye(J)[j_hat]
    method = state.meta_method
    if method is MetaMethod.DISCRETE:
        return vertex
    if design.n_rows == 0:
        log.info("t=%d: no declared rows yet, %s falls back to the discrete pick", t, method.value)
        return vertex
    if method is MetaMethod.SIMPLEX:
        return continuous_select(design, n_restarts=state.n_restarts, seed=state.seed + t).weights.copy()
    if method is MetaMethod.GRID:
        return convex_grid_select(design, state.grid_K).weights.copy()
    return nnls_meta(design)


def step(state: EnsembleState, slice_: TimeSlice) -> EnsembleState:
    """Score, update risks, select, then refit: one tick of the Super Learner."""
    t = state.t + 1
    if slice_.time_index != t:
        raise ValueError(f"out-of-order slice: expected time_index {t}, got {slice_.time_index}")
    for snap in state.snapshots:
        if snap.fit_time != t - 1:
            raise AssertionError(f"snapshot {snap.learner_id!r} has fit_time {snap.fit_time}, expected {t - 1}")
    loss = LossSpec(state.outcome_bound)
    P = state.predictions(slice_)
    losses = {sid: float(loss.values(P[:, j], slice_.w, slice_.y).mean()) for j, sid in enumerate(state.learner_ids)}
    sl_pred = np.clip(P @ state.current_weights, 0.0, state.outcome_bound)
    sl_loss = float(loss.values(sl_pred, slice_.w, slice_.y).mean())

    ledger = update_ledger(state.ledger, losses)
    j_hat = discrete_select(ledger)
    declared = slice_.w == 1
    blocks = state.design_blocks + ((P[declared], slice_.y[declared]),)
    design = MetaDesign.stack(blocks, len(state.specs))
    w = _meta_weights(state, design, j_hat, t)

    if design.n_rows:
        combo = np.clip(design.P @ w, 0.0, state.outcome_bound)
        meta_risk = float(((design.y - combo) ** 2).sum()) / (t * slice_.n_units)
    else:
        meta_risk = 0.0

    history = state.history + (slice_,)
    snapshots = tuple(refit(spec, history, state.outcome_bound) for spec in state.specs)
    return replace(
        state,
        snapshots=snapshots,
        ledger=ledger,
        history=history,
        design_blocks=blocks,
        selections=state.selections + (j_hat,),
        weights=state.weights + (w,),
        meta_risks=state.meta_risks + (meta_risk,),
        sl_loss_sum=state.sl_loss_sum + sl_loss,
    )


# ---------------------------------------------------------------------------
# Overarching Super Learner
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class OverarchingState:
    """A Super Learner whose library is a list of Super Learners.

    ``pick`` is the inner learner with the smallest cumulative one-step-ahead
    risk and ``weights`` are NNLS weights over the inner learners' predictions.
    """

    inner: tuple
    ledger: RiskLedger
    design_blocks: tuple = ()
    picks: tuple = ()
    nnls_weights: tuple = ()

    @property
    def pick(self) -> int:
        return self.picks[-1]

    @property
    def weights(self) -> np.ndarray:
        return self.nnls_weights[-1]

    @property
    def normalized_weights(self) -> np.ndarray:
        w = self.weights
        return w / w.sum() if w.sum() > 0 else w


def init_overarching(states: Sequence[EnsembleState], names: Sequence[str] | None = None) -> OverarchingState:
    states = tuple(states)
    if not states:
        raise ValueError("need at least one inner Super Learner")
    names = tuple(names) if names is not None else tuple(f"sl{i}:{s.meta_method.value}" for i, s in enumerate(states))
    return OverarchingState(states, RiskLedger.empty(names))


def overarching_step(ostate: OverarchingState, slice_: TimeSlice) -> OverarchingState:
    if any(s.t != ostate.ledger.times_seen for s in ostate.inner):
        raise ValueError("inner Super Learners are not time-aligned")
    B = ostate.inner[0].outcome_bound
    loss = LossSpec(B)
    cols = np.column_stack([s.predict(slice_) for s in ostate.inner])
    losses = {name: float(loss.values(cols[:, k], slice_.w, slice_.y).mean()) for k, name in enumerate(ostate.ledger.learner_ids)}
    ledger = update_ledger(ostate.ledger, losses)
    declared = slice_.w == 1
    blocks = ostate.design_blocks + ((cols[declared], slice_.y[declared]),)
    design = MetaDesign.stack(blocks, len(ostate.inner))
    pick = discrete_select(ledger)
    w = nnls_meta(design) if design.n_rows else np.eye(len(ostate.inner))[pick]
    return OverarchingState(
        tuple(step(s, slice_) for s in ostate.inner),
        ledger,
        blocks,
        ostate.picks + (pick,),
        ostate.nnls_weights + (w,),
    )


# ---------------------------------------------------------------------------
# scikit-learn style front end
# ---------------------------------------------------------------------------


class SequentialSuperLearner(BaseEstimator):
    """Estimator wrapper around :func:`step`.

    ``partial_fit`` consumes one :class:`TimeSlice`; ``fit`` consumes a whole
    :class:`PanelDataset`. After ``t`` slices, ``predict`` returns the Super
    Learner's prediction built from ``theta_{., t}``.
    """

    def __init__(self, learners=(), meta_method="discrete", outcome_bound=1.0, grid_K=20, n_restarts=5, seed=0):
        self.learners = learners
        self.meta_method = meta_method
        self.outcome_bound = outcome_bound
        self.grid_K = grid_K
        self.n_restarts = n_restarts
        self.seed = seed

    def _init(self, outcome_bound):
        self.state_ = init_state(self.learners, outcome_bound, self.meta_method, self.grid_K, self.n_restarts, self.seed)

    def partial_fit(self, slice_: TimeSlice):
        if not hasattr(self, "state_"):
            self._init(self.outcome_bound)
        self.state_ = step(self.state_, slice_)
        return self

    def fit(self, dataset: PanelDataset, y=None):
        self._init(dataset.outcome_bound)
        for s in dataset:
            self.state_ = step(self.state_, s)
        return self

    def predict(self, slice_: TimeSlice) -> np.ndarray:
        return self.state_.predict(slice_)

    @property
    def selected_(self) -> int:
        return self.state_.selections[-1]

    @property
    def weights_(self) -> np.ndarray:
        return self.state_.current_weights

    @property
    def empirical_risks_(self) -> np.ndarray:
        return self.state_.ledger.empirical_risks()
