"""Monte Carlo harness: replay the pipeline on simulated panels and score the bounds.

Each replication generates a panel, runs the sequential Super Learner over every
time step and records, per time, the empirical risks, the oracle conditional
risks (noise integrated exactly, covariates by Monte Carlo with common random
numbers across learners) and the derived excess risks and gap statistics.
Checks compare empirical frequencies or means to the bounds; a bound of 1 or
more is vacuous and is reported but never counted as a pass.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import bounds as bd
from .ensemble import init_state, step
from .learners import LearnerFamily, LearnerSpec
from .simulator import DgpConfig, bound_parameters_from_manifest, generate, manifest_for, replication_seed

log = logging.getLogger(__name__)

Z95 = 1.959963984540054

DEFAULT_LIBRARY = (
    LearnerSpec("mean", LearnerFamily.CONSTANT_MEAN),
    LearnerSpec("ols", LearnerFamily.OLS),
    LearnerSpec("ridge", LearnerFamily.RIDGE, {"penalty": 50.0}),
    LearnerSpec("boost", LearnerFamily.STUMP_BOOST, {"rounds": 30, "shrinkage": 0.2}),
)


class VerificationError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class ReplicationResult:
    """Per-time observables of one replication; arrays are indexed by ``t - 1`` (and learner)."""

    seed: int
    selections: np.ndarray  # discrete pick, 0-based
    oracle_selections: np.ndarray
    empirical_risks: np.ndarray  # R_hat_{j,t}, shape (T, J)
    empirical_optimal: np.ndarray  # R_hat_t(theta_star)
    oracle_risks: np.ndarray  # R_tilde_{j,t}
    optimal_risk: np.ndarray  # R_tilde_t(theta_star)
    H_tilde: np.ndarray  # R_tilde_{j,t} - R_tilde_t(theta_star), shape (T, J)
    oracle_se: np.ndarray  # Monte Carlo standard error of H_tilde
    var: np.ndarray  # var_{j,tau} per time, shape (T, J)
    var_tilde: np.ndarray  # time-averaged variance of the unit-average gap, shape (T, J)
    meta_risks: np.ndarray  # in-sample risk of the continuous combination
    weights: np.ndarray = field(repr=False)

    @property
    def H_hat(self) -> np.ndarray:
        return self.empirical_risks - self.empirical_optimal[:, None]

    @property
    def excess_sl(self) -> np.ndarray:
        return self.H_tilde[np.arange(len(self.selections)), self.selections]

    @property
    def excess_oracle(self) -> np.ndarray:
        return self.H_tilde[np.arange(len(self.oracle_selections)), self.oracle_selections]

    @property
    def discrete_risk(self) -> np.ndarray:
        return self.empirical_risks[np.arange(len(self.selections)), self.selections]

    def fingerprint(self) -> bytes:
        parts = [np.uint64(self.seed).tobytes()]
        for name in ("selections", "oracle_selections", "empirical_risks", "empirical_optimal",
                     "oracle_risks", "optimal_risk", "H_tilde", "var", "var_tilde", "meta_risks", "weights"):
            parts.append(np.ascontiguousarray(getattr(self, name)).tobytes())
        return b"".join(parts)


def oracle_slice_step(oracle, snapshots, z, rng_key, mc_draws: int = 20):
    """Excess conditional risk, mean unit variance, variance of the unit average and MC error per snapshot.

    Every snapshot sees the same covariate draws (``rng_key`` seeds each of them).
    """
    out = np.zeros((4, len(snapshots)))
    for j, snap in enumerate(snapshots):
        m1, m2, m4, se = oracle.gap_moments(snap, z, mc_draws, np.random.default_rng(rng_key))
        out[:3, j] = oracle.slice_quantities(m1, m2, m4, z)
        out[3, j] = se
    return out[0], out[1], out[2], out[3]


def run_one(dgp: DgpConfig, specs, seed: int, meta_method: str = "simplex-nnls", mc_draws: int = 20) -> ReplicationResult:
    """One end-to-end replication at ``seed`` (overrides ``dgp.seed``)."""
    cfg = replace(dgp, seed=int(seed))
    data, _, oracle = generate(cfg)
    state = init_state(specs, cfg.outcome_bound, meta_method, seed=int(seed) & 0xFFFFFFFF)
    T, J = data.horizon, len(specs)
    ex = np.zeros((T, J))
    se2 = np.zeros((T, J))
    var = np.zeros((T, J))
    var_avg = np.zeros((T, J))
    opt = np.zeros(T)
    emp_opt = np.zeros(T)
    emp = np.zeros((T, J))
    sel = np.zeros(T, dtype=int)
    meta = np.zeros(T)
    weights = np.zeros((T, J))
    seed_words = [int(seed) & 0xFFFFFFFF, int(seed) >> 32]
    for t, sl in enumerate(data.slices, start=1):
        z = sl.z
        ex[t - 1], var[t - 1], var_avg[t - 1], se = oracle_slice_step(oracle, state.snapshots, z, seed_words + [t], mc_draws)
        se2[t - 1] = se * se
        opt[t - 1] = oracle.optimal_risk(z)
        ystar = oracle.theta_star(sl.features)
        emp_opt[t - 1] = float(np.where(sl.w == 1, (sl.y - ystar) ** 2, 0.0).mean())
        state = step(state, sl)
        emp[t - 1] = state.ledger.empirical_risks()
        sel[t - 1] = state.selections[-1]
        meta[t - 1] = state.meta_risks[-1]
        weights[t - 1] = state.weights[-1]
    steps = np.arange(1, T + 1)
    H_tilde = np.cumsum(ex, axis=0) / steps[:, None]
    opt_cum = np.cumsum(opt) / steps
    return ReplicationResult(
        seed=int(seed),
        selections=sel,
        oracle_selections=np.argmin(H_tilde, axis=1),
        empirical_risks=emp,
        empirical_optimal=np.cumsum(emp_opt) / steps,
        oracle_risks=H_tilde + opt_cum[:, None],
        optimal_risk=opt_cum,
        H_tilde=H_tilde,
        oracle_se=np.sqrt(np.cumsum(se2, axis=0)) / steps[:, None],
        var=var,
        var_tilde=np.cumsum(var_avg, axis=0) / steps[:, None],
        meta_risks=meta,
        weights=weights,
    )


def _run_one_safe(args):
    dgp, specs, seed, meta_method, mc_draws = args
    try:
        return run_one(dgp, specs, seed, meta_method, mc_draws)
    except Exception as exc:  # surface the seed of the failing replication
        raise VerificationError(f"replication with seed {seed} failed: {exc!r}") from exc


def replication_seeds(master: int, R: int) -> list[int]:
    return [replication_seed(master, i) for i in range(R)]


def run_replications(
    dgp: DgpConfig,
    learners=DEFAULT_LIBRARY,
    R: int = 200,
    master_seed: int | None = None,
    meta_method: str = "simplex-nnls",
    mc_draws: int = 20,
    workers: int = 1,
    seeds=None,
) -> list[ReplicationResult]:
    """``R`` independent replications, ordered by replication index.

    Replication ``i`` uses ``replication_seed(master_seed, i)``; ``seeds`` overrides
    the derived list (used by the determinism self-check's fault injection).
    """
    if R < 1:
        raise ValueError("R must be >= 1")
    master = dgp.seed if master_seed is None else master_seed
    seeds = replication_seeds(master, R) if seeds is None else list(seeds)
    if len(seeds) != R:
        raise ValueError("need exactly R seeds")
    jobs = [(dgp, tuple(learners), s, meta_method, mc_draws) for s in seeds]
    if workers > 1 and R > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_one_safe, jobs))
    return [_run_one_safe(j) for j in jobs]


@dataclass(frozen=True)
class SelfCheck:
    distinct_seeds: bool
    reproducible: bool

    @property
    def passed(self) -> bool:
        return self.distinct_seeds and self.reproducible


def determinism_self_check(results, dgp: DgpConfig, learners=DEFAULT_LIBRARY, meta_method="simplex-nnls", mc_draws=20) -> SelfCheck:
    """Replication seeds must be pairwise distinct and the first replication must replay bit-for-bit."""
    seeds = [r.seed for r in results]
    again = run_one(dgp, tuple(learners), seeds[0], meta_method, mc_draws)
    return SelfCheck(len(set(seeds)) == len(seeds), again.fingerprint() == results[0].fingerprint())


# ---------------------------------------------------------------------------
# Checks
# ---------------------------------------------------------------------------


def wilson_half_width(freq: float, n: int, z: float = Z95) -> float:
    if n < 1:
        return 1.0
    z2 = z * z
    return z / (1 + z2 / n) * math.sqrt(freq * (1 - freq) / n + z2 / (4 * n * n))


@dataclass(frozen=True)
class Cell:
    t: int
    x: float
    frequency: float
    bound: float
    half_width: float
    label: str = ""
    extra: tuple = ()

    @property
    def vacuous(self) -> bool:
        return self.bound >= 1.0

    @property
    def status(self) -> str:
        if self.vacuous:
            return "vacuous"
        return "pass" if self.frequency <= self.bound + self.half_width else "fail"


@dataclass(frozen=True)
class Report:
    name: str
    cells: tuple
    columns: tuple = ("t", "x", "frequency", "bound", "half_width", "status")
    notes: tuple = ()

    def counts(self) -> dict:
        c = {"pass": 0, "vacuous": 0, "fail": 0}
        for cell in self.cells:
            c[cell.status] += 1
        return c

    @property
    def passed(self) -> bool:
        return self.counts()["fail"] == 0

    def rows(self):
        for c in self.cells:
            yield c.row() if hasattr(c, "row") else c


def default_x_grid(low: float, gaps, points: int = 12, bound=None, x_max: float = math.inf, target: float = 0.05) -> np.ndarray:
    """Log-spaced from ``low`` up to 1.5 times the largest observed gap.

    When ``bound`` (a callable of ``x``) stays at or above ``target`` on that
    range, the grid is extended towards the first ``x`` where it drops below
    ``target``, but never past ``x_max`` (the a-priori envelope of the statistic;
    cells beyond it are uninformative by construction).
    """
    low = max(float(low), 1e-12)
    high = max(1.5 * float(np.max(gaps)) if len(gaps) else 0.0, 10 * low)
    grid = np.geomspace(low, high, points)
    if bound is not None and high < x_max and bound(high) >= target:
        x = high
        while bound(x) >= target and x < x_max:
            x = min(2.0 * x, x_max)
        grid = np.unique(np.concatenate([grid, np.geomspace(high, x, points // 2 + 1)]))
    return grid


@dataclass(frozen=True)
class TailCell(Cell):
    time_bound: float = 1.0
    graph_bound: float = 1.0
    regime: str = ""

    def row(self) -> dict:
        return {
            "t": self.t, "x": self.x, "frequency": self.frequency, "time_bound": self.time_bound,
            "graph_bound": self.graph_bound, "bound": self.bound, "wilson_half_width": self.half_width,
            "regime": self.regime, "status": self.status,
        }


def _safe_tail(p, x, which):
    try:
        return bd.theorem1_tail_bound(p, x, which)
    except ValueError:  # below the stratification threshold: no statement
        return 1.0


def tail_check(results, manifest: dict, x_grid=None, t_values=(2, 5, 10), a: float = 1.0) -> Report:
    """Empirical tail of ``excess_SL - (1+2a) excess_oracle`` against the high-probability bounds."""
    R = len(results)
    cells = []
    for t in t_values:
        if t > len(results[0].selections):
            continue
        p = bound_parameters_from_manifest({**manifest, "a": a}, t=t)
        gaps = np.array([r.excess_sl[t - 1] - (1 + 2 * a) * r.excess_oracle[t - 1] for r in results])
        c = bd.theorem1_constants(p)
        if x_grid is None:
            xs = default_x_grid(min(c.x_low, c.x_low_p), gaps,
                                bound=lambda x: min(_safe_tail(p, x, "time-bound"), _safe_tail(p, x, "graph-bound")),
                                x_max=p.b1)
        else:
            xs = np.asarray(x_grid, float)
        regime = bd.regime_compare(p).regime.value
        for x in xs:
            freq = float(np.mean(gaps >= x))
            tb, gb = _safe_tail(p, x, "time-bound"), _safe_tail(p, x, "graph-bound")
            cells.append(TailCell(t, float(x), freq, min(tb, gb), wilson_half_width(freq, R), time_bound=tb, graph_bound=gb, regime=regime))
    return Report("tail", tuple(cells))


@dataclass(frozen=True)
class ExpectationRow:
    t: int
    which: str
    mean: float
    se: float
    bound: float
    N: int

    @property
    def status(self) -> str:
        return "pass" if self.mean <= self.bound + 2 * self.se else "fail"

    def row(self) -> dict:
        return {"t": self.t, "bound_kind": self.which, "N": self.N, "mean": self.mean, "se": self.se,
                "bound": self.bound, "status": self.status}


@dataclass(frozen=True)
class ExpectationReport:
    rows_: tuple

    @property
    def cells(self):
        return self.rows_

    def counts(self) -> dict:
        c = {"pass": 0, "vacuous": 0, "fail": 0}
        for r in self.rows_:
            c[r.status] += 1
        return c

    @property
    def passed(self) -> bool:
        return self.counts()["fail"] == 0

    def rows(self):
        return (r.row() for r in self.rows_)


def expectation_check(results, manifest: dict, t_values=None, a: float = 1.0, N=None, Nprime=None) -> ExpectationReport:
    """Mean of ``excess_SL - (1+2a) excess_oracle`` against both expectation bounds.

    ``N`` and ``N'`` default to their minimal admissible values; explicit values
    that violate the side conditions raise :class:`bounds.ParameterError`.
    """
    T = len(results[0].selections)
    t_values = range(1, T + 1) if t_values is None else [t for t in t_values if t <= T]
    out = []
    for t in t_values:
        p = bound_parameters_from_manifest({**manifest, "a": a}, t=t, N=N, Nprime=Nprime)
        vals = np.array([r.excess_sl[t - 1] - (1 + 2 * a) * r.excess_oracle[t - 1] for r in results])
        mean = float(vals.mean())
        se = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else float("inf")
        for which, n_ in (("time-bound", p.N), ("graph-bound", p.Nprime)):
            out.append(ExpectationRow(t, which, mean, se, bd.corollary_bound(p, which), n_))
    return ExpectationReport(tuple(out))


@dataclass(frozen=True)
class BernsteinCell(Cell):
    learner: int = 0

    def row(self) -> dict:
        return {"t": self.t, "learner": self.learner, "x": self.x, "frequency": self.frequency, "bound": self.bound,
                "wilson_half_width": self.half_width, "status": self.status}


@dataclass(frozen=True)
class BernsteinReport(Report):
    var_tilde_max: float = 0.0
    v2: float = 0.0
    var_tilde_violations: int = 0

    @property
    def passed(self) -> bool:
        return self.counts()["fail"] == 0 and self.var_tilde_violations == 0


def bernstein_check(results, manifest: dict, V: float | None = None, x_grid=None, t_values=None) -> BernsteinReport:
    """Deviation ``|H_hat - H_tilde|`` per learner against the Bernstein-type bound, plus ``var_tilde <= v2``."""
    p = bound_parameters_from_manifest(manifest)
    V = p.v1 if V is None else float(V)
    R = len(results)
    T, J = results[0].H_tilde.shape
    t_values = range(1, T + 1) if t_values is None else [t for t in t_values if t <= T]
    v2 = bd.v2(p)
    vt = np.stack([r.var_tilde for r in results])
    cells = []
    for t in t_values:
        for j in range(J):
            dev = np.array([abs(r.H_hat[t - 1, j] - r.H_tilde[t - 1, j]) for r in results])
            ok = np.array([r.var[:t, j].max() <= V for r in results])
            if x_grid is None:
                xs = default_x_grid(max(dev.min(), 1e-6), dev, 8,
                                    bound=lambda x: bd.theorem2_tail_bound(p.ratio, V, p.b2, x), x_max=p.b2)
            else:
                xs = np.asarray(x_grid, float)
            for x in xs:
                freq = float(np.mean((dev >= x) & ok))
                b = bd.theorem2_tail_bound(p.ratio, V, p.b2, float(x)) if x > 0 else 1.0
                cells.append(BernsteinCell(t, float(x), freq, b, wilson_half_width(freq, R), learner=j))
    return BernsteinReport("deviation", tuple(cells), var_tilde_max=float(vt.max()), v2=v2,
                           var_tilde_violations=int((vt > v2).sum()))


@dataclass(frozen=True)
class JansonCell(Cell):
    def row(self) -> dict:
        return {"x": self.x, "frequency": self.frequency, "bound": self.bound,
                "wilson_half_width": self.half_width, "status": self.status}


@dataclass(frozen=True)
class JansonReport(Report):
    V: float = 0.0
    B: float = 0.0
    deg: int = 1
    sd: float = 0.0


def janson_empirical_check(
    dgp: DgpConfig,
    R: int = 100_000,
    x_grid=None,
    predictor: float = 0.5,
    seed: int | None = None,
    chunk: int = 2000,
) -> JansonReport:
    """Single-slice upper tail of the centred unit-average loss against Janson's bound.

    The summary stream is drawn once and held fixed; each of the ``R`` draws
    resamples covariates, declarations and noise. Summands are the losses of the
    constant ``predictor`` and lie in ``[0, B^2]``, so the one-sided envelope is
    ``B^2``. ``V`` is the average per-unit variance, estimated from the draws.
    """
    from .core import degree_plus_one
    from .simulator import build_graph, OracleHandle

    graph, loading = build_graph(dgp)
    oracle = OracleHandle(dgp, graph.vertices, loading)
    rng = np.random.default_rng(dgp.seed if seed is None else seed)
    n = dgp.unit_count
    z = oracle.draw_summary(rng, n)
    p = oracle.declaration_probability(z)
    losses_sum = np.zeros(n)
    losses_sq = np.zeros(n)
    avgs = np.empty(R)
    done = 0
    while done < R:
        m = min(chunk, R - done)
        X = oracle.draw_covariates(rng, (m, n))
        F = np.concatenate([X, np.broadcast_to(z, (m,) + z.shape)], axis=-1)
        y = oracle.theta_star(F.reshape(m * n, -1)).reshape(m, n) + oracle.draw_noise(rng, m)
        w = rng.random((m, n)) < p
        loss = np.where(w, (y - predictor) ** 2, 0.0)
        losses_sum += loss.sum(axis=0)
        losses_sq += (loss * loss).sum(axis=0)
        avgs[done:done + m] = loss.mean(axis=1)
        done += m
    mu = losses_sum / R
    V = float(np.mean(losses_sq / R - mu * mu) * R / max(R - 1, 1))
    centred = avgs - mu.mean()
    Bl = dgp.outcome_bound**2
    deg = degree_plus_one(graph)
    sd = float(centred.std())
    xs = np.linspace(0, 5 * sd, 11) if x_grid is None else np.asarray(x_grid, float)
    cells = []
    for x in xs:
        freq = float(np.mean(centred >= x))
        cells.append(JansonCell(0, float(x), freq, bd.janson_bound(n, deg, V, Bl, float(x)), wilson_half_width(freq, R)))
    return JansonReport("janson", tuple(cells), V=V, B=Bl, deg=deg, sd=sd)


def summarize(reports: dict) -> str:
    lines = []
    total = {"pass": 0, "vacuous": 0, "fail": 0}
    for name, rep in reports.items():
        c = rep.counts()
        for k in total:
            total[k] += c[k]
        lines.append(f"{name:<22} pass={c['pass']:<5} vacuous={c['vacuous']:<5} fail={c['fail']}")
    lines.append(f"{'total':<22} pass={total['pass']:<5} vacuous={total['vacuous']:<5} fail={total['fail']}")
    return "\n".join(lines)


def default_manifest(dgp: DgpConfig, J: int = len(DEFAULT_LIBRARY), a: float = 1.0) -> dict:
    return manifest_for(dgp, J=J, a=a)


def argmin_violations(results) -> int:
    """Count (replication, t, j) cells where a selected index is not an argmin of its risk vector."""
    bad = 0
    for r in results:
        rows = np.arange(len(r.selections))
        emp_sel = r.empirical_risks[rows, r.selections][:, None]
        orc_sel = r.oracle_risks[rows, r.oracle_selections][:, None]
        bad += int((emp_sel > r.empirical_risks).sum()) + int((orc_sel > r.oracle_risks).sum())
    return bad


def dominance_violations(results, tol: float = 1e-8) -> int:
    """Times where the simplex combination's empirical risk exceeds the discrete pick's by more than ``tol``."""
    return sum(int((r.meta_risks > r.discrete_risk + tol).sum()) for r in results)


def assumption_audit(data, oracle, manifest: dict, seed: int = 0, n_predictors: int = 100, draws: int = 10_000) -> dict:
    from .simulator import empirical_assumption_audit

    return empirical_assumption_audit(data, oracle, bound_parameters_from_manifest(manifest),
                                      n_predictors=n_predictors, draws=draws, seed=seed)
