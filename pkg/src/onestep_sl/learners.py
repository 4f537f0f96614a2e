"""Base learners and the snapshot machinery used for honest one-step-ahead scoring.

Each family is a small scikit-learn compatible regressor (``fit``/``predict``,
``get_params``). :func:`refit` turns a :class:`LearnerSpec` plus a history of
slices into an immutable :class:`PredictorSnapshot` whose predictions are clipped
to ``[0, B]``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .core import PanelDataset, TimeSlice


class LearnerFamily(str, enum.Enum):
    CONSTANT_MEAN = "constant-mean"
    OLS = "ordinary-least-squares"
    RIDGE = "ridge"
    KS_KNN = "ks-knn"
    STUMP_BOOST = "stump-boost"


# ---------------------------------------------------------------------------
# Estimators
# ---------------------------------------------------------------------------


class ConstantMean(RegressorMixin, BaseEstimator):
    """Predicts the training mean everywhere."""

    def fit(self, X, y):
        X, y = check_X_y(X, y, ensure_min_features=0)
        self.mean_ = float(np.mean(y))
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "mean_")
        X = check_array(X, ensure_min_features=0)
        return np.full(X.shape[0], self.mean_)


class LeastSquares(RegressorMixin, BaseEstimator):
    """Ordinary least squares with an unpenalised intercept.

    Rank-deficient designs get the minimum-norm slope (SVD-based ``lstsq``).
    """

    def fit(self, X, y):
        X, y = check_X_y(X, y, ensure_min_features=0)
        self.x_mean_ = X.mean(axis=0)
        y_mean = float(y.mean())
        if X.shape[1]:
            self.coef_, *_ = np.linalg.lstsq(X - self.x_mean_, y - y_mean, rcond=None)
        else:
            self.coef_ = np.zeros(0)
        self.intercept_ = y_mean - float(self.x_mean_ @ self.coef_)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, ensure_min_features=0)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return X @ self.coef_ + self.intercept_


class RidgeRegressor(LeastSquares):
    """Ridge regression; the intercept is not penalised, so huge penalties give the mean."""

    def __init__(self, penalty=1.0):
        self.penalty = penalty

    def fit(self, X, y):
        if self.penalty < 0:
            raise ValueError("ridge penalty must be >= 0")
        X, y = check_X_y(X, y, ensure_min_features=0)
        self.x_mean_ = X.mean(axis=0)
        y_mean = float(y.mean())
        Xc = X - self.x_mean_
        q = X.shape[1]
        if q:
            gram = Xc.T @ Xc + self.penalty * np.eye(q)
            self.coef_, *_ = np.linalg.lstsq(gram, Xc.T @ (y - y_mean), rcond=None)
        else:
            self.coef_ = np.zeros(0)
        self.intercept_ = y_mean - float(self.x_mean_ @ self.coef_)
        self.n_features_in_ = q
        return self


def _check_quantiles(q: np.ndarray, name: str) -> None:
    if q.ndim != 1 or q.size < 1:
        raise ValueError(f"{name} must be a non-empty 1-d quantile vector")
    if np.any(np.diff(q) < 0):
        raise ValueError(f"{name} is not sorted nondecreasing")


def ks_distance(q1, q2) -> float:
    """Kolmogorov-Smirnov distance between the step CDFs of two quantile vectors.

    Each vector of length ``m`` is read as an empirical distribution putting mass
    ``1/m`` on each entry.
    """
    q1 = np.asarray(q1, dtype=float)
    q2 = np.asarray(q2, dtype=float)
    _check_quantiles(q1, "q1")
    _check_quantiles(q2, "q2")
    if q1.size != q2.size:
        raise ValueError("quantile vectors must have equal lengths")
    support = np.concatenate([q1, q2])
    m = q1.size
    f1 = np.searchsorted(q1, support, side="right") / m
    f2 = np.searchsorted(q2, support, side="right") / m
    return float(np.max(np.abs(f1 - f2)))


def ks_distance_matrix(Q: np.ndarray, R: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Pairwise :func:`ks_distance` between rows of ``Q`` and rows of ``R`` (rows sorted)."""
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    m = Q.shape[1]
    out = np.empty((Q.shape[0], R.shape[0]))
    for s in range(0, Q.shape[0], chunk):
        q = Q[s:s + chunk]
        # cdf_X_at_Y[i, k, l] = #{X-row entries <= Y-row entry l}
        fq_at_q = (q[:, None, :] <= q[:, :, None]).sum(-1)[:, None, :]
        fr_at_q = (R[None, :, None, :] <= q[:, None, :, None]).sum(-1)
        fq_at_r = (q[:, None, None, :] <= R[None, :, :, None]).sum(-1)
        fr_at_r = (R[:, None, :] <= R[:, :, None]).sum(-1)[None, :, :]
        d = np.maximum(np.abs(fq_at_q - fr_at_q).max(-1), np.abs(fq_at_r - fr_at_r).max(-1))
        out[s:s + chunk] = d / m
    return out


class KSNearestNeighbors(RegressorMixin, BaseEstimator):
    """k-NN regression on one quantile block, with KS distance between blocks.

    ``block_start``/``block_length`` select the columns holding a sorted quantile
    summary (``block_length=0`` means "to the last column"). Distance ties keep the
    training row order, so callers that want a particular tie rule order rows
    accordingly before fitting.
    """

    def __init__(self, k=5, block_start=0, block_length=0):
        self.k = k
        self.block_start = block_start
        self.block_length = block_length

    def _block(self, X):
        stop = X.shape[1] if not self.block_length else self.block_start + self.block_length
        B = X[:, self.block_start:stop]
        if B.shape[1] < 1 or stop > X.shape[1]:
            raise ValueError("quantile block outside the feature range")
        if np.any(np.diff(B, axis=1) < 0):
            raise ValueError("quantile block rows must be sorted nondecreasing")
        return B

    def fit(self, X, y):
        if int(self.k) < 1:
            raise ValueError("k must be >= 1")
        X, y = check_X_y(X, y)
        self.blocks_ = self._block(X)
        self.y_ = y.copy()
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "blocks_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        k = min(int(self.k), len(self.y_))
        D = ks_distance_matrix(self._block(X), self.blocks_)
        nearest = np.argsort(D, axis=1, kind="stable")[:, :k]
        return self.y_[nearest].mean(axis=1)


class StumpBoost(RegressorMixin, BaseEstimator):
    """Least-squares gradient boosting with depth-1 trees.

    Splits are searched exhaustively on every column at midpoints between
    consecutive distinct sorted values; the first best split wins ties.
    """

    def __init__(self, n_rounds=50, shrinkage=0.1):
        self.n_rounds = n_rounds
        self.shrinkage = shrinkage

    @staticmethod
    def _best_stump(X_sorted, order, r):
        n = len(r)
        total = r.sum()
        best = (0.0, -1, 0.0, total / n, total / n)
        for j in range(X_sorted.shape[1]):
            xs = X_sorted[:, j]
            cs = np.cumsum(r[order[:, j]])[:-1]
            cuts = np.flatnonzero(xs[1:] > xs[:-1])
            if cuts.size == 0:
                continue
            nl = cuts + 1.0
            sl = cs[cuts]
            gain = sl**2 / nl + (total - sl) ** 2 / (n - nl) - total**2 / n
            i = int(np.argmax(gain))
            if gain[i] > best[0] + 1e-12 * max(1.0, abs(best[0])):
                c = cuts[i]
                thr = 0.5 * (xs[c] + xs[c + 1])
                best = (float(gain[i]), j, thr, sl[i] / nl[i], (total - sl[i]) / (n - nl[i]))
        return best[1:]

    def fit(self, X, y):
        if int(self.n_rounds) < 1:
            raise ValueError("stump-boost needs at least one round")
        if not 0 < self.shrinkage <= 1:
            raise ValueError("shrinkage must lie in (0, 1]")
        X, y = check_X_y(X, y, ensure_min_features=0)
        self.init_ = float(y.mean())
        r = y - self.init_
        self.stumps_ = []
        if X.shape[1]:
            order = np.argsort(X, axis=0, kind="stable")
            X_sorted = np.take_along_axis(X, order, axis=0)
        for _ in range(int(self.n_rounds)):
            if X.shape[1] == 0:
                break
            j, thr, left, right = self._best_stump(X_sorted, order, r)
            if j < 0:
                break
            self.stumps_.append((j, thr, left, right))
            r = r - self.shrinkage * np.where(X[:, j] <= thr, left, right)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "stumps_")
        X = check_array(X, ensure_min_features=0)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        out = np.full(X.shape[0], self.init_)
        for j, thr, left, right in self.stumps_:
            out += self.shrinkage * np.where(X[:, j] <= thr, left, right)
        return out


# ---------------------------------------------------------------------------
# Registry specs and snapshots
# ---------------------------------------------------------------------------

_DEFAULTS: dict[LearnerFamily, dict[str, float]] = {
    LearnerFamily.CONSTANT_MEAN: {},
    LearnerFamily.OLS: {},
    LearnerFamily.RIDGE: {"penalty": 1.0},
    LearnerFamily.KS_KNN: {"k": 5, "block_start": 0, "block_length": 0},
    LearnerFamily.STUMP_BOOST: {"rounds": 50, "shrinkage": 0.1},
}


@dataclass(frozen=True)
class LearnerSpec:
    learner_id: str
    family: LearnerFamily
    hyperparameters: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        fam = LearnerFamily(self.family)
        object.__setattr__(self, "family", fam)
        hp = dict(_DEFAULTS[fam])
        unknown = set(self.hyperparameters) - set(hp)
        if unknown:
            raise ValueError(f"learner {self.learner_id!r}: unknown hyperparameters {sorted(unknown)}")
        hp.update({k: float(v) for k, v in self.hyperparameters.items()})
        object.__setattr__(self, "hyperparameters", hp)
        if fam is LearnerFamily.RIDGE and hp["penalty"] < 0:
            raise ValueError("ridge penalty must be >= 0")
        if fam is LearnerFamily.KS_KNN:
            if hp["k"] < 1 or hp["k"] != int(hp["k"]):
                raise ValueError("ks-knn needs an integer k >= 1")
            if hp["block_start"] < 0 or hp["block_length"] < 0:
                raise ValueError("ks-knn block indices must be >= 0")
        if fam is LearnerFamily.STUMP_BOOST:
            if hp["rounds"] < 1:
                raise ValueError("stump-boost rounds must be >= 1")
            if not 0 < hp["shrinkage"] <= 1:
                raise ValueError("stump-boost shrinkage must lie in (0, 1]")

    def make_estimator(self) -> BaseEstimator:
        hp = self.hyperparameters
        if self.family is LearnerFamily.CONSTANT_MEAN:
            return ConstantMean()
        if self.family is LearnerFamily.OLS:
            return LeastSquares()
        if self.family is LearnerFamily.RIDGE:
            return RidgeRegressor(penalty=hp["penalty"])
        if self.family is LearnerFamily.KS_KNN:
            return KSNearestNeighbors(int(hp["k"]), int(hp["block_start"]), int(hp["block_length"]))
        return StumpBoost(n_rounds=int(hp["rounds"]), shrinkage=hp["shrinkage"])


@dataclass(frozen=True, eq=False)
class PredictorSnapshot:
    """The predictor ``theta_{j, fit_time}``; ``estimator=None`` is the zero predictor."""

    learner_id: str
    fit_time: int
    outcome_bound: float
    estimator: Any = None
    n_features: int | None = None

    def predict_features(self, features: np.ndarray) -> np.ndarray:
        """Clipped predictions for raw feature rows, ignoring declarations."""
        F = np.asarray(features, dtype=float)
        if F.ndim != 2:
            raise ValueError("features must be 2-d")
        if self.n_features is not None and F.shape[1] != self.n_features:
            raise ValueError(f"dimension mismatch: fitted on {self.n_features} features, got {F.shape[1]}")
        if self.estimator is None:
            return np.zeros(F.shape[0])
        return np.clip(self.estimator.predict(F), 0.0, self.outcome_bound)


def initial_predictor(spec: LearnerSpec, outcome_bound: float = 1.0) -> PredictorSnapshot:
    """The fixed starting predictor ``theta_{j,0}``: zero everywhere."""
    return PredictorSnapshot(spec.learner_id, 0, float(outcome_bound))


def _declared_rows(slices: Sequence[TimeSlice]) -> tuple[np.ndarray, np.ndarray]:
    """Declared rows pooled over time, ordered by unit then time."""
    feats, ys, unit_rank, times = [], [], [], []
    for s in slices:
        keep = s.w == 1
        feats.append(s.features[keep])
        ys.append(s.y[keep])
        unit_rank.append(np.flatnonzero(keep))
        times.append(np.full(int(keep.sum()), s.time_index))
    F = np.vstack(feats)
    y = np.concatenate(ys)
    order = np.lexsort((np.concatenate(times), np.concatenate(unit_rank)))
    return F[order], y[order]


def refit(spec: LearnerSpec, history, outcome_bound: float | None = None) -> PredictorSnapshot:
    """Fit ``spec`` on every declared observation in ``history`` (slices ``1..t``)."""
    if isinstance(history, PanelDataset):
        slices = history.slices
        outcome_bound = history.outcome_bound if outcome_bound is None else outcome_bound
    else:
        slices = tuple(history)
    if not slices:
        raise ValueError("refit needs a non-empty history")
    if outcome_bound is None:
        raise ValueError("outcome_bound is required when history is a plain sequence of slices")
    t = slices[-1].time_index
    n_features = slices[0].x.shape[1] + slices[0].z.shape[1]
    F, y = _declared_rows(slices)
    if len(y) == 0:
        return PredictorSnapshot(spec.learner_id, t, float(outcome_bound), None, n_features)
    est = spec.make_estimator().fit(F, y)
    return PredictorSnapshot(spec.learner_id, t, float(outcome_bound), est, n_features)


def predict(snapshot: PredictorSnapshot, slice_: TimeSlice, as_mapping: bool = False):
    """Per-unit predictions for one slice; undeclared units receive 0."""
    p = snapshot.predict_features(slice_.features)
    p = np.where(slice_.w == 1, p, 0.0)
    if as_mapping:
        return dict(zip(slice_.unit_ids, p.tolist()))
    return p
