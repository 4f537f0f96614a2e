"""Domain types shared by every other module: observations, panels, graphs, loss, risk ledger.

All types are immutable values. Arrays held by a :class:`TimeSlice` are copied on
construction and flagged read-only, so slices can be shared between workers.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np


class DataError(ValueError):
    """Raised when panel data or a graph violates its structural contract."""


@dataclass(frozen=True)
class UnitObservation:
    """One ``(unit, time)`` record ``(W, X, Z, Y)``."""

    unit_id: Hashable
    declaration: int
    covariates: tuple[float, ...]
    summary: tuple[float, ...]
    outcome: float

    def __post_init__(self):
        if self.declaration not in (0, 1):
            raise DataError(f"declaration must be 0 or 1, got {self.declaration!r}")
        if self.declaration == 0 and self.outcome != 0:
            raise DataError(f"unit {self.unit_id!r}: outcome must be 0 when declaration is 0")
        if not np.isfinite(self.outcome):
            raise DataError(f"unit {self.unit_id!r}: non-finite outcome")


def _frozen(a, dtype, ndim) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    if ndim == 2 and arr.ndim == 1:
        arr = arr.reshape(-1, 1) if arr.size else arr.reshape(len(arr), 0)
    if arr.ndim != ndim:
        raise DataError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TimeSlice:
    """All units observed at one time index, stored column-wise.

    ``x`` has shape ``(n_units, q)`` and ``z`` has shape ``(n_units, p)``; ``p`` may be 0.
    """

    time_index: int
    unit_ids: tuple
    w: np.ndarray
    x: np.ndarray
    z: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        n = len(self.unit_ids)
        object.__setattr__(self, "unit_ids", tuple(self.unit_ids))
        object.__setattr__(self, "w", _frozen(self.w, np.int8, 1))
        object.__setattr__(self, "x", _frozen(self.x, float, 2))
        object.__setattr__(self, "z", _frozen(self.z, float, 2))
        object.__setattr__(self, "y", _frozen(self.y, float, 1))
        if self.time_index < 1:
            raise DataError(f"time_index must be positive, got {self.time_index}")
        if len(set(self.unit_ids)) != n:
            raise DataError(f"t={self.time_index}: duplicate unit ids")
        for name in ("w", "x", "z", "y"):
            if getattr(self, name).shape[0] != n:
                raise DataError(f"t={self.time_index}: column {name!r} has wrong length")
        if not np.isin(self.w, (0, 1)).all():
            raise DataError(f"t={self.time_index}: declaration must be 0/1")
        bad = (self.w == 0) & (self.y != 0)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise DataError(f"t={self.time_index}, unit {self.unit_ids[i]!r}: w=0 but y != 0")
        if not (np.isfinite(self.x).all() and np.isfinite(self.z).all() and np.isfinite(self.y).all()):
            raise DataError(f"t={self.time_index}: non-finite values")

    @property
    def n_units(self) -> int:
        return len(self.unit_ids)

    @property
    def features(self) -> np.ndarray:
        """Covariates with the summary appended, the design seen by base learners."""
        return np.hstack([self.x, self.z])

    @property
    def summary_stream(self) -> np.ndarray:
        return self.z.ravel()

    @property
    def units(self) -> dict:
        return {
            uid: UnitObservation(uid, int(self.w[i]), tuple(self.x[i]), tuple(self.z[i]), float(self.y[i]))
            for i, uid in enumerate(self.unit_ids)
        }

    def reorder(self, unit_ids: Sequence) -> "TimeSlice":
        pos = {u: i for i, u in enumerate(self.unit_ids)}
        idx = np.array([pos[u] for u in unit_ids], dtype=int)
        return TimeSlice(self.time_index, tuple(unit_ids), self.w[idx], self.x[idx], self.z[idx], self.y[idx])

    @classmethod
    def from_observations(cls, time_index: int, observations: Iterable[UnitObservation]) -> "TimeSlice":
        obs = list(observations)
        q = len(obs[0].covariates) if obs else 0
        p = len(obs[0].summary) if obs else 0
        if any(len(o.covariates) != q or len(o.summary) != p for o in obs):
            raise DataError(f"t={time_index}: inconsistent covariate/summary dimensions")
        return cls(
            time_index,
            tuple(o.unit_id for o in obs),
            [o.declaration for o in obs],
            np.array([o.covariates for o in obs], dtype=float).reshape(len(obs), q),
            np.array([o.summary for o in obs], dtype=float).reshape(len(obs), p),
            [o.outcome for o in obs],
        )


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Time-ordered slices over a fixed unit set, with outcomes in ``[0, outcome_bound]``."""

    slices: tuple
    outcome_bound: float

    def __post_init__(self):
        slices = tuple(self.slices)
        if not slices:
            raise DataError("panel has no time slices")
        if not self.outcome_bound > 0:
            raise DataError("outcome_bound must be positive")
        first = slices[0]
        ids = first.unit_ids
        idset = set(ids)
        fixed = []
        for k, s in enumerate(slices):
            if s.time_index != first.time_index + k:
                raise DataError(f"time indices must be consecutive; got {s.time_index} after {first.time_index + k - 1}")
            if set(s.unit_ids) != idset:
                raise DataError(f"t={s.time_index}: unit set differs from t={first.time_index}")
            if s.x.shape[1] != first.x.shape[1] or s.z.shape[1] != first.z.shape[1]:
                raise DataError(f"t={s.time_index}: covariate/summary dimensions differ")
            if (s.y < 0).any() or (s.y > self.outcome_bound).any():
                raise DataError(f"t={s.time_index}: outcome outside [0, {self.outcome_bound}]")
            fixed.append(s if s.unit_ids == ids else s.reorder(ids))
        object.__setattr__(self, "slices", tuple(fixed))

    @property
    def unit_ids(self) -> tuple:
        return self.slices[0].unit_ids

    @property
    def unit_count(self) -> int:
        return len(self.unit_ids)

    @property
    def horizon(self) -> int:
        return len(self.slices)

    def truncate(self, t: int) -> "PanelDataset":
        """History made of the first ``t`` slices."""
        if not 1 <= t <= len(self.slices):
            raise ValueError(f"cannot truncate a {len(self.slices)}-slice panel to t={t}")
        return PanelDataset(self.slices[:t], self.outcome_bound)

    def __len__(self):
        return len(self.slices)

    def __iter__(self):
        return iter(self.slices)


@dataclass(frozen=True, eq=False)
class DependencyGraph:
    """Undirected graph on the unit set; missing edges encode conditional independence."""

    vertices: tuple
    neighbors: Mapping = field(repr=False)

    def __post_init__(self):
        verts = tuple(self.vertices)
        vset = set(verts)
        if len(vset) != len(verts):
            raise DataError("duplicate graph vertices")
        nb = {v: frozenset(self.neighbors.get(v, ())) for v in verts}
        for v, ns in nb.items():
            if v in ns:
                raise DataError(f"self-loop at vertex {v!r}")
            for u in ns:
                if u not in vset:
                    raise DataError(f"edge to unknown vertex {u!r}")
                if v not in nb[u]:
                    raise DataError(f"adjacency is not symmetric between {v!r} and {u!r}")
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "neighbors", nb)

    @classmethod
    def from_edges(cls, vertices: Iterable, edges: Iterable[tuple]) -> "DependencyGraph":
        verts = tuple(vertices)
        nb: dict = {v: set() for v in verts}
        for a, b in edges:
            if a == b:
                raise DataError(f"self-loop at vertex {a!r}")
            if a not in nb or b not in nb:
                raise DataError(f"edge ({a!r}, {b!r}) mentions an unknown vertex")
            nb[a].add(b)
            nb[b].add(a)
        return cls(verts, nb)

    @classmethod
    def from_cliques(cls, membership: Mapping) -> "DependencyGraph":
        """Disjoint cliques from a ``unit -> clique id`` map."""
        groups: dict = {}
        for v, c in membership.items():
            groups.setdefault(c, []).append(v)
        nb = {}
        for members in groups.values():
            ms = set(members)
            for v in members:
                nb[v] = ms - {v}
        return cls(tuple(membership), nb)

    def edges(self) -> list[tuple]:
        order = {v: i for i, v in enumerate(self.vertices)}
        out = []
        for v in self.vertices:
            for u in sorted(self.neighbors[v], key=order.__getitem__):
                if order[u] > order[v]:
                    out.append((v, u))
        return out

    def relabel(self, mapping: Mapping) -> "DependencyGraph":
        return DependencyGraph(
            tuple(mapping[v] for v in self.vertices),
            {mapping[v]: {mapping[u] for u in ns} for v, ns in self.neighbors.items()},
        )


def degree_plus_one(g: DependencyGraph) -> int:
    """1 plus the maximum vertex degree of ``g``."""
    if not g.vertices:
        raise DataError("empty graph")
    return 1 + max(len(ns) for ns in g.neighbors.values())


class LossKind(str, enum.Enum):
    LEAST_SQUARES_INDICATOR = "least-squares-with-indicator"


@dataclass(frozen=True)
class LossSpec:
    outcome_bound: float
    kind: LossKind = LossKind.LEAST_SQUARES_INDICATOR

    def __post_init__(self):
        if not self.outcome_bound > 0:
            raise ValueError("outcome_bound must be positive")
        object.__setattr__(self, "kind", LossKind(self.kind))

    def values(self, predictions: np.ndarray, w: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Vectorised pointwise loss ``(y - p)^2 * 1{w = 1}``."""
        p = np.asarray(predictions, dtype=float)
        if p.size and (np.nanmin(p) < 0 or np.nanmax(p) > self.outcome_bound or np.isnan(p).any()):
            raise ValueError("prediction out of range")
        return np.where(np.asarray(w) == 1, (np.asarray(y, dtype=float) - p) ** 2, 0.0)


def pointwise_loss(loss: LossSpec, prediction: float, obs: UnitObservation) -> float:
    if not 0 <= prediction <= loss.outcome_bound:
        raise ValueError("prediction out of range")
    if obs.declaration != 1:
        return 0.0
    return (obs.outcome - prediction) ** 2


def _aligned(predictions, slice_: TimeSlice) -> np.ndarray:
    if isinstance(predictions, Mapping):
        missing = [u for u in slice_.unit_ids if u not in predictions]
        if missing:
            raise KeyError(f"missing predictions for units {missing}")
        return np.array([predictions[u] for u in slice_.unit_ids], dtype=float)
    p = np.asarray(predictions, dtype=float)
    if p.shape != (slice_.n_units,):
        raise ValueError(f"expected {slice_.n_units} predictions, got shape {p.shape}")
    return p


def averaged_loss(loss: LossSpec, predictions, slice_: TimeSlice) -> float:
    """Mean pointwise loss over all units of the slice.

    ``predictions`` is either a ``unit_id -> value`` mapping or an array aligned with
    ``slice_.unit_ids``.
    """
    p = _aligned(predictions, slice_)
    return float(loss.values(p, slice_.w, slice_.y).mean())


@dataclass(frozen=True)
class RiskLedger:
    """Per-learner cumulative sums of averaged losses; ``R_hat = sum / t``."""

    learner_ids: tuple
    sums: tuple
    times_seen: int = 0

    @classmethod
    def empty(cls, learner_ids: Sequence) -> "RiskLedger":
        ids = tuple(learner_ids)
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate learner ids")
        return cls(ids, (0.0,) * len(ids), 0)

    def empirical_risks(self) -> np.ndarray:
        if self.times_seen == 0:
            raise ValueError("empty ledger")
        return np.array(self.sums, dtype=float) / self.times_seen

    def risk(self, learner_id) -> float:
        return float(self.empirical_risks()[self.learner_ids.index(learner_id)])


def update_ledger(ledger: RiskLedger, per_learner_slice_losses: Mapping) -> RiskLedger:
    if set(per_learner_slice_losses) != set(ledger.learner_ids):
        extra = set(per_learner_slice_losses) - set(ledger.learner_ids)
        missing = set(ledger.learner_ids) - set(per_learner_slice_losses)
        raise KeyError(f"learner id mismatch: missing={sorted(map(str, missing))} unknown={sorted(map(str, extra))}")
    sums = tuple(s + float(per_learner_slice_losses[j]) for s, j in zip(ledger.sums, ledger.learner_ids))
    return RiskLedger(ledger.learner_ids, sums, ledger.times_seen + 1)
