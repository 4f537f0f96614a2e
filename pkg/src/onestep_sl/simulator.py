"""Synthetic panels with a known regression function and a known dependency graph.

Every unit carries ``q`` iid Uniform(0,1) covariates, an optional block of ``m``
sorted Uniform(0,1) draws (a quantile summary, usable by the KS k-NN learner)
and ``p`` iid Uniform(0,1) summary values ``Z``. The declaration ``W`` is
Bernoulli with a probability depending on ``Z`` only. Declared outcomes are

    Y = theta_star(features) + shared + idiosyncratic,

where ``idiosyncratic ~ s_i * U(-1, 1)`` and ``shared = s_c * L @ U`` for iid
``U(-1, 1)`` sources. ``L`` is the clique indicator (disjoint cliques) or a
moving-average window on a ring (lattice radius ``r``), so units are dependent
only through ``L`` and the graph is exact. Config validation proves by interval
arithmetic that ``Y`` never leaves ``[0, B]``, so nothing is clipped and
``E[Y | X, Z, W = 1] = theta_star`` holds exactly.
"""
from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import sparse

from .bounds import BoundParameters, least_squares_constants, min_N, min_Nprime, strong_convexity_gamma
from .bounds import v2 as _v2
from .core import DependencyGraph, PanelDataset, TimeSlice, degree_plus_one

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def replication_seed(master: int, index: int) -> int:
    """Seed of replication ``index``: ``splitmix64(master XOR splitmix64(index))``."""
    return splitmix64((int(master) & MASK64) ^ splitmix64(int(index)))


class ConfigError(ValueError):
    pass


class GraphKind(str, enum.Enum):
    CLIQUES = "disjoint-cliques"
    LATTICE = "lattice-radius"


class TruthKind(str, enum.Enum):
    LINEAR = "linear"
    PIECEWISE = "piecewise"


class DeclarationKind(str, enum.Enum):
    CONSTANT = "constant"
    LOGISTIC = "logistic"


@dataclass(frozen=True)
class DgpConfig:
    """Data-generating process.

    ``truth_coefficients`` holds an intercept then one coefficient per feature
    (covariates, quantile block, summary, in that order). For ``piecewise`` truth
    each feature enters as the step ``1{f > 0.5}``. ``declaration_parameters`` is
    ``(prob,)`` for ``constant`` and ``(a0, a1)`` for ``logistic``, where the
    probability is ``sigmoid(a0 + a1 * mean(z))``.
    """

    unit_count: int = 500
    graph_kind: GraphKind = GraphKind.CLIQUES
    graph_param: int = 5
    horizon: int = 10
    outcome_bound: float = 1.0
    n_covariates: int = 2
    quantile_block: int = 0
    summary_dim: int = 1
    truth_kind: TruthKind = TruthKind.LINEAR
    truth_coefficients: tuple = (0.3, 0.2, 0.1, 0.15)
    declaration_kind: DeclarationKind = DeclarationKind.LOGISTIC
    declaration_parameters: tuple = (-1.0, 2.0)
    shared_noise: float = 0.1
    idiosyncratic_noise: float = 0.1
    seed: int = 20240101

    def __post_init__(self):
        object.__setattr__(self, "graph_kind", GraphKind(self.graph_kind))
        object.__setattr__(self, "truth_kind", TruthKind(self.truth_kind))
        object.__setattr__(self, "declaration_kind", DeclarationKind(self.declaration_kind))
        object.__setattr__(self, "truth_coefficients", tuple(float(c) for c in self.truth_coefficients))
        object.__setattr__(self, "declaration_parameters", tuple(float(c) for c in self.declaration_parameters))
        self.validate()

    @property
    def n_features(self) -> int:
        return self.n_covariates + self.quantile_block + self.summary_dim

    def truth_range(self) -> tuple[float, float]:
        """Exact range of ``theta_star`` over the unit feature box."""
        c0, cs = self.truth_coefficients[0], np.array(self.truth_coefficients[1:])
        return c0 + float(np.minimum(cs, 0).sum()), c0 + float(np.maximum(cs, 0).sum())

    def validate(self) -> None:
        if self.unit_count < 1:
            raise ConfigError("unit_count: must be >= 1")
        if self.horizon < 1:
            raise ConfigError("horizon: must be >= 1")
        if not self.outcome_bound > 0:
            raise ConfigError("outcome_bound: must be > 0")
        if min(self.n_covariates, self.quantile_block, self.summary_dim) < 0:
            raise ConfigError("n_covariates: feature dimensions must be >= 0")
        if self.graph_kind is GraphKind.CLIQUES:
            d = self.graph_param
            if d < 1 or self.unit_count % d:
                raise ConfigError(f"graph_param: clique size {d} must be >= 1 and divide unit_count {self.unit_count}")
        else:
            r = self.graph_param
            if r < 0 or 2 * r + 1 > self.unit_count:
                raise ConfigError(f"graph_param: lattice radius {r} needs 0 <= 2r+1 <= unit_count")
        if len(self.truth_coefficients) != 1 + self.n_features:
            raise ConfigError(
                f"truth_coefficients: needs 1 + {self.n_features} entries, got {len(self.truth_coefficients)}"
            )
        if min(self.shared_noise, self.idiosyncratic_noise) < 0:
            raise ConfigError("shared_noise: noise amplitudes must be >= 0")
        if self.declaration_kind is DeclarationKind.CONSTANT:
            if len(self.declaration_parameters) != 1 or not 0 <= self.declaration_parameters[0] <= 1:
                raise ConfigError("declaration_parameters: constant declaration needs one probability in [0, 1]")
        elif len(self.declaration_parameters) != 2:
            raise ConfigError("declaration_parameters: logistic declaration needs (a0, a1)")
        lo, hi = self.truth_range()
        s = self.shared_noise + self.idiosyncratic_noise
        if lo - s < 0 or hi + s > self.outcome_bound:
            raise ConfigError(
                f"truth_coefficients: theta_star range [{lo:g}, {hi:g}] widened by noise {s:g} leaves [0, {self.outcome_bound:g}]"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("graph_kind", "truth_kind", "declaration_kind"):
            d[k] = d[k].value
        d["truth_coefficients"] = list(self.truth_coefficients)
        d["declaration_parameters"] = list(self.declaration_parameters)
        return d


def _unit_ids(n: int) -> tuple:
    width = len(str(n - 1))
    return tuple(f"u{i:0{width}d}" for i in range(n))


@dataclass(frozen=True, eq=False)
class OracleHandle:
    """Access to the true law: ``theta_star``, declaration probabilities, noise structure."""

    config: DgpConfig
    unit_ids: tuple
    loading: sparse.csr_matrix = field(repr=False)

    @property
    def B(self) -> float:
        return self.config.outcome_bound

    @property
    def noise_variance(self) -> np.ndarray:
        """Per-unit variance of shared + idiosyncratic noise."""
        cfg = self.config
        row_sq = np.asarray(self.loading.multiply(self.loading).sum(axis=1)).ravel()
        return (cfg.shared_noise**2 * row_sq + cfg.idiosyncratic_noise**2) / 3.0

    def theta_star(self, features: np.ndarray) -> np.ndarray:
        F = np.asarray(features, dtype=float)
        c = np.asarray(self.config.truth_coefficients)
        if self.config.truth_kind is TruthKind.PIECEWISE:
            F = (F > 0.5).astype(float)
        return c[0] + F @ c[1:]

    def declaration_probability(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float).reshape(len(z), -1)
        cfg = self.config
        if cfg.declaration_kind is DeclarationKind.CONSTANT:
            return np.full(len(z), cfg.declaration_parameters[0])
        a0, a1 = cfg.declaration_parameters
        zbar = z.mean(axis=1) if z.shape[1] else np.zeros(len(z))
        return 1.0 / (1.0 + np.exp(-(a0 + a1 * zbar)))

    def draw_covariates(self, rng: np.random.Generator, size) -> np.ndarray:
        """Covariates plus the sorted quantile block; shape ``size + (q + m,)``."""
        cfg = self.config
        size = tuple(np.atleast_1d(size))
        x = rng.random(size + (cfg.n_covariates,))
        block = np.sort(rng.random(size + (cfg.quantile_block,)), axis=-1)
        return np.concatenate([x, block], axis=-1)

    def draw_summary(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.random((n, self.config.summary_dim))

    def draw_noise(self, rng: np.random.Generator, reps: int | None = None) -> np.ndarray:
        cfg = self.config
        n, S = self.loading.shape
        shape = (n,) if reps is None else (reps, n)
        if reps is None:
            shared = self.loading @ rng.uniform(-1, 1, S)
        else:
            shared = (self.loading @ rng.uniform(-1, 1, (S, reps))).T
        return cfg.shared_noise * shared + cfg.idiosyncratic_noise * rng.uniform(-1, 1, shape)

    def draw_slice(self, rng: np.random.Generator, time_index: int, z: np.ndarray | None = None) -> TimeSlice:
        n = len(self.unit_ids)
        x = self.draw_covariates(rng, n)
        if z is None:
            z = self.draw_summary(rng, n)
        w = (rng.random(n) < self.declaration_probability(z)).astype(np.int8)
        eps = self.draw_noise(rng)
        ystar = self.theta_star(np.hstack([x, z]))
        y = np.where(w == 1, ystar + eps, 0.0)
        if (y < 0).any() or (y > self.B).any():
            raise AssertionError("generated outcome outside [0, B]")
        return TimeSlice(time_index, self.unit_ids, w, x, z, y)

    def gap_moments(self, predictor, z: np.ndarray, n_draws: int, rng: np.random.Generator):
        """Per-unit Monte Carlo moments of ``d = theta_star - theta`` over fresh covariates.

        Returns ``(m1, m2, m4, se2)``: the means of ``d``, ``d^2``, ``d^4`` over
        ``n_draws`` covariate draws per unit, given the unit's summary, plus the
        standard error of the unit-average of ``p * d^2``. ``predictor`` maps a
        feature matrix to predictions (a snapshot's ``predict_features`` or any
        callable).
        """
        n = len(z)
        X = self.draw_covariates(rng, (n_draws, n))
        F = np.concatenate([X, np.broadcast_to(z, (n_draws,) + z.shape)], axis=-1).reshape(n_draws * n, -1)
        predict = getattr(predictor, "predict_features", predictor)
        d = (self.theta_star(F) - predict(F)).reshape(n_draws, n)
        d2 = d * d
        p = self.declaration_probability(z)
        per_draw = (d2 * p).mean(axis=1)
        se = float(per_draw.std(ddof=1) / math.sqrt(n_draws)) if n_draws > 1 else float("nan")
        return d.mean(axis=0), d2.mean(axis=0), (d2 * d2).mean(axis=0), se

    def slice_quantities(self, m1, m2, m4, z):
        """Conditional excess risk, mean unit variance and variance of the unit average.

        All three refer to the loss gap ``loss(theta) - loss(theta_star)`` on one
        slice given its summary stream, with the noise integrated out exactly.
        """
        p = self.declaration_probability(z)
        sig2 = self.noise_variance
        n = len(p)
        excess = float((p * m2).mean())
        unit_var = p * m4 + 4 * p * sig2 * m2 - (p * m2) ** 2
        u = p * m1
        s2 = self.config.shared_noise**2 / 3.0
        Lu = self.loading.T @ u
        row_sq = np.asarray(self.loading.multiply(self.loading).sum(axis=1)).ravel()
        cross = 4 * s2 * (float(Lu @ Lu) - float((row_sq * u * u).sum()))
        var_avg = (float(unit_var.sum()) + cross) / n**2
        return excess, float(unit_var.mean()), var_avg

    def optimal_risk(self, z: np.ndarray) -> float:
        """Conditional risk of ``theta_star`` on a slice with summary ``z``."""
        return float((self.declaration_probability(z) * self.noise_variance).mean())


@dataclass(frozen=True)
class RiskEstimate:
    value: float
    se: float


def build_graph(config: DgpConfig) -> tuple[DependencyGraph, sparse.csr_matrix]:
    n = config.unit_count
    ids = _unit_ids(n)
    if config.graph_kind is GraphKind.CLIQUES:
        d = config.graph_param
        clique = np.arange(n) // d
        graph = DependencyGraph.from_cliques({ids[i]: int(clique[i]) for i in range(n)})
        loading = sparse.csr_matrix((np.ones(n), (np.arange(n), clique)), shape=(n, n // d))
        return graph, loading
    r = config.graph_param
    half = r // 2
    edges = [(ids[i], ids[(i + k) % n]) for i in range(n) for k in range(1, r + 1) if (i + k) % n != i]
    graph = DependencyGraph.from_edges(ids, edges)
    rows, cols = [], []
    for i in range(n):
        for k in range(-half, half + 1):
            rows.append(i)
            cols.append((i + k) % n)
    loading = sparse.csr_matrix((np.full(len(rows), 1.0 / (2 * half + 1)), (rows, cols)), shape=(n, n))
    return graph, loading


def generate(config: DgpConfig) -> tuple[PanelDataset, DependencyGraph, OracleHandle]:
    """Draw a full panel; the same config (seed included) always gives the same panel."""
    graph, loading = build_graph(config)
    oracle = OracleHandle(config, graph.vertices, loading)
    rng = np.random.default_rng(config.seed)
    slices = tuple(oracle.draw_slice(rng, t) for t in range(1, config.horizon + 1))
    return PanelDataset(slices, config.outcome_bound), graph, oracle


def oracle_conditional_risk(
    oracle: OracleHandle,
    snapshot,
    z: np.ndarray,
    mc_samples: int = 10_000,
    rng: np.random.Generator | None = None,
    method: str = "semi-analytic",
) -> RiskEstimate:
    """Conditional risk of ``snapshot`` on a fresh slice whose summary stream is ``z``.

    ``semi-analytic`` integrates noise and declarations in closed form and samples
    covariates only; ``monte-carlo`` samples covariates, declarations and noise.
    Roughly ``mc_samples`` unit draws are used.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    z = np.asarray(z, dtype=float)
    n = len(z)
    reps = max(2, math.ceil(mc_samples / n))
    if method == "semi-analytic":
        _, m2, _, se = oracle.gap_moments(snapshot, z, reps, rng)
        p = oracle.declaration_probability(z)
        return RiskEstimate(float((p * m2).mean()) + oracle.optimal_risk(z), se)
    if method != "monte-carlo":
        raise ValueError(f"unknown method {method!r}")
    predict = getattr(snapshot, "predict_features", snapshot)
    per_rep = np.empty(reps)
    p = oracle.declaration_probability(z)
    for r in range(reps):
        X = oracle.draw_covariates(rng, n)
        F = np.hstack([X, z])
        w = rng.random(n) < p
        y = oracle.theta_star(F) + oracle.draw_noise(rng)
        per_rep[r] = float(np.where(w, (y - predict(F)) ** 2, 0.0).mean())
    return RiskEstimate(float(per_rep.mean()), float(per_rep.std(ddof=1) / math.sqrt(reps)))


@dataclass(frozen=True, eq=False)
class OracleSelection:
    index: int
    risks: np.ndarray
    optimal_risk: float
    se: np.ndarray


def oracle_select(
    oracle: OracleHandle,
    trajectory,
    summaries,
    t: int,
    mc_samples: int = 10_000,
    seed: int = 0,
) -> OracleSelection:
    """Oracle index and cumulative conditional risks ``R_tilde_{j,t}``.

    ``trajectory[tau - 1]`` is the tuple of snapshots ``theta_{j, tau-1}`` scored at
    time ``tau``; ``summaries[tau - 1]`` is that slice's summary stream.
    """
    if len(trajectory) < t or len(summaries) < t:
        raise ValueError(f"incomplete trajectory: need {t} steps, got {min(len(trajectory), len(summaries))}")
    J = len(trajectory[0])
    sums = np.zeros(J)
    var_sums = np.zeros(J)
    opt = 0.0
    for tau in range(t):
        z = np.asarray(summaries[tau], dtype=float)
        for j, snap in enumerate(trajectory[tau]):
            # common random numbers across learners at each tau
            est = oracle_conditional_risk(oracle, snap, z, mc_samples, np.random.default_rng([seed, tau]))
            sums[j] += est.value
            var_sums[j] += est.se**2
        opt += oracle.optimal_risk(z)
    risks = sums / t
    return OracleSelection(int(np.argmin(risks)), risks, opt / t, np.sqrt(var_sums) / t)


def analytic_constants(config: DgpConfig) -> dict:
    """Assumption constants for the squared loss on ``[0, B]``."""
    B = config.outcome_bound
    a1, a2 = least_squares_constants(B)
    return {
        "b1": B * B,
        "b2": 2 * B * B,
        "v1": B**4,
        "beta": 1.0,
        "gamma": strong_convexity_gamma(a1, a2),
        "a1": a1,
        "a2": a2,
    }


def manifest_for(config: DgpConfig, J: int = 1, a: float = 1.0) -> dict:
    graph, _ = build_graph(config)
    deg = degree_plus_one(graph)
    m = {"B": config.outcome_bound, **analytic_constants(config)}
    m.update(
        {
            "unit_count": config.unit_count,
            "deg": deg,
            "ratio": config.unit_count / deg,
            "horizon": config.horizon,
            "J": int(J),
            "a": float(a),
            "seed": int(config.seed),
        }
    )
    return m


def bound_parameters_from_manifest(m: dict, t: int | None = None, N: int | None = None, Nprime: int | None = None) -> BoundParameters:
    """Bound parameters for time ``t`` (defaults to the horizon) with the minimal admissible N, N'."""
    t = int(m.get("t", m.get("horizon", 1))) if t is None else int(t)
    ratio = m["ratio"] if "ratio" in m else m["unit_count"] / m["deg"]
    p = BoundParameters(
        b1=m["b1"], b2=m["b2"], beta=m["beta"], gamma=m["gamma"], v1=m["v1"], ratio=ratio,
        a=m.get("a", 1.0), J=int(m.get("J", 1)), t=t,
    )
    N = m.get("N") if N is None else N
    Nprime = m.get("Nprime") if Nprime is None else Nprime
    return p.with_(N=int(N) if N else min_N(p), Nprime=int(Nprime) if Nprime else min_Nprime(p))


@dataclass(frozen=True)
class AuditCheck:
    name: str
    statistic: float
    limit: float
    violations: int
    cases: int

    @property
    def passed(self) -> bool:
        return self.violations == 0


def random_predictors(config: DgpConfig, count: int, rng: np.random.Generator) -> list:
    """Random clipped-linear predictors on the feature box, for audits."""
    B, k = config.outcome_bound, config.n_features
    out = []
    for _ in range(count):
        c0 = rng.uniform(0, B)
        c = rng.uniform(-B, B, k) / max(k, 1)
        out.append(lambda F, c0=c0, c=c: np.clip(c0 + F @ c, 0.0, B))
    return out


def empirical_assumption_audit(
    dataset: PanelDataset,
    oracle: OracleHandle,
    params: BoundParameters,
    predictors=None,
    n_predictors: int = 100,
    draws: int = 10_000,
    seed: int = 0,
    tol: float = 1e-12,
) -> dict:
    """Check the loss-gap envelopes, variance bounds and variance/mean link on simulated draws.

    Each predictor is paired with one slice's summary stream (cycling through
    ``dataset``). Sample-based checks use ``draws`` fresh unit draws of
    ``(X, W, noise)``; moment-based checks integrate the noise exactly and average
    over ``draws`` covariate draws.
    """
    rng = np.random.default_rng(seed)
    if predictors is None:
        predictors = random_predictors(oracle.config, n_predictors, rng)
    n = dataset.unit_count
    reps = max(2, math.ceil(draws / n))
    sig2 = oracle.noise_variance
    stats = {k: [-math.inf, 0] for k in ("b1", "b2", "v1", "v2", "gamma")}
    for i, pred in enumerate(predictors):
        z = dataset.slices[i % dataset.horizon].z
        predict = getattr(pred, "predict_features", pred)
        m1, m2, m4, _ = oracle.gap_moments(pred, z, reps, rng)
        p = oracle.declaration_probability(z)
        _, unit_var_mean, var_avg = oracle.slice_quantities(m1, m2, m4, z)
        # sampled loss gaps
        X = oracle.draw_covariates(rng, (reps, n))
        F = np.concatenate([X, np.broadcast_to(z, (reps,) + z.shape)], axis=-1).reshape(reps * n, -1)
        ystar = oracle.theta_star(F).reshape(reps, n)
        theta = predict(F).reshape(reps, n)
        w = rng.random((reps, n)) < p
        y = ystar + oracle.draw_noise(rng, reps)
        gap = np.where(w, (y - theta) ** 2 - (y - ystar) ** 2, 0.0)
        mean_gap = p * m2
        checks = {
            "b1": (np.abs(gap).max(), params.b1),
            "b2": (np.abs(gap - mean_gap).max(), params.b2),
            "v1": (unit_var_mean, params.v1),
            "v2": (var_avg, _v2(params)),
        }
        lhs = p * (m4 + 4 * sig2 * m2)
        rhs = params.gamma * mean_gap**params.beta
        checks["gamma"] = (float(np.max(lhs - rhs)), 0.0)
        for k, (stat, lim) in checks.items():
            stats[k][0] = max(stats[k][0], float(stat))
            stats[k][1] += int(stat > lim + tol)
    limits = {"b1": params.b1, "b2": params.b2, "v1": params.v1, "v2": _v2(params), "gamma": 0.0}
    names = {
        "b1": "max |loss gap| <= b1",
        "b2": "max |loss gap - conditional mean| <= b2",
        "v1": "mean unit conditional variance <= v1",
        "v2": "variance of unit average <= v2",
        "gamma": "max E[gap^2] - gamma E[gap]^beta <= 0",
    }
    return {k: AuditCheck(names[k], stats[k][0], limits[k], stats[k][1], len(predictors)) for k in stats}


