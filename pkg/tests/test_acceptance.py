"""Acceptance suite: one test per criterion, each recorded as a PASS/FAIL line in the terminal summary.

The shared Monte Carlo run uses the default desk-scale simulator (|A| = 500, cliques of 5,
T = 10, four learners) with R = 500 replications; the first 200 replications, which are
exactly an R = 200 run under the same master seed, feed the criteria stated at R = 200.
"""
import hashlib
import math
import time

import numpy as np
import pytest

from onestep_sl.bounds import BoundParameters, Regime, h, quadratic_lemma_solve, regime_compare, regime_sweep
from onestep_sl.cli import main
from onestep_sl.ensemble import MetaDesign, continuous_select, convex_grid_select, simplex_kkt_residual
from onestep_sl.simulator import DgpConfig, bound_parameters_from_manifest, generate, manifest_for
from onestep_sl.verify import (
    DEFAULT_LIBRARY, argmin_violations, assumption_audit, bernstein_check, dominance_violations, expectation_check,
    janson_empirical_check, run_replications, tail_check,
)

pytestmark = pytest.mark.slow

DGP = DgpConfig()
MASTER = 20240101


@pytest.fixture(scope="module")
def shared_run():
    t0 = time.perf_counter()
    res = run_replications(DGP, DEFAULT_LIBRARY, R=500, master_seed=MASTER)
    return res, time.perf_counter() - t0


@pytest.fixture(scope="module")
def manifest():
    return manifest_for(DGP, J=len(DEFAULT_LIBRARY), a=1.0)


def record(reg, label, ok, detail):
    reg[label] = (bool(ok), detail)
    assert ok, detail


def test_c01_definitional_argmins(shared_run, acceptance_registry):
    res, secs = shared_run
    bad = argmin_violations(res[:200])
    per_rep = secs / len(res)
    record(acceptance_registry, "1", bad == 0 and 200 * per_rep <= 300,
           f"argmin violations {bad} over 200 replications x 10 steps x 4 learners; est. {200 * per_rep:.0f}s")


def test_c02_continuous_dominance(shared_run, acceptance_registry):
    res, _ = shared_run
    bad = dominance_violations(res[:200], tol=1e-8)
    worst = max(float(np.max(r.meta_risks - r.discrete_risk)) for r in res[:200])
    record(acceptance_registry, "2", bad == 0, f"violations {bad}; worst meta - discrete = {worst:.2e}")


def test_c03_simplex_solver(acceptance_registry):
    rng = np.random.default_rng(3)
    worst_gap, worst_kkt = 0.0, math.inf
    for i in range(100):
        J = 2 + i % 2
        n = int(rng.integers(5, 60))
        P = rng.random((n, J))
        y = np.clip(P @ rng.dirichlet(np.ones(J)) + rng.normal(0, 0.2, n), 0, 1)
        d = MetaDesign(P, y)
        w = continuous_select(d).weights
        gap = abs(d.objective(w) - d.objective(convex_grid_select(d, 400).weights))
        worst_gap = max(worst_gap, gap)
        worst_kkt = min(worst_kkt, simplex_kkt_residual(d, w))
    record(acceptance_registry, "3", worst_gap <= 1e-4 and worst_kkt >= -1e-6,
           f"max |continuous - grid(K=400)| = {worst_gap:.2e}; min KKT residual = {worst_kkt:.2e}")


def test_c04_deviation_bound(shared_run, manifest, acceptance_registry):
    res, _ = shared_run
    rep = bernstein_check(res[:200], manifest)
    c = rep.counts()
    record(acceptance_registry, "4", rep.passed,
           f"cells pass={c['pass']} vacuous={c['vacuous']} fail={c['fail']}; var_tilde max {rep.var_tilde_max:.3g} "
           f"<= v2 {rep.v2:.3g}, violations {rep.var_tilde_violations}")


def test_c05_tail_bound(shared_run, manifest, acceptance_registry):
    res, secs = shared_run
    rep = tail_check(res, manifest, t_values=(2, 5, 10), a=1.0)
    c = rep.counts()
    record(acceptance_registry, "5", rep.passed and secs <= 900,
           f"R=500 in {secs:.0f}s; cells pass={c['pass']} vacuous={c['vacuous']} fail={c['fail']}")


def test_c06_expectation_bound(shared_run, manifest, acceptance_registry):
    res, _ = shared_run
    rep = expectation_check(res[:200], manifest)
    c = rep.counts()
    worst = max(r.mean - r.bound - 2 * r.se for r in rep.rows_)
    record(acceptance_registry, "6", rep.passed,
           f"rows pass={c['pass']} fail={c['fail']}; max(mean - bound - 2se) = {worst:.3g}")


def test_c07_regime_consistency(acceptance_registry):
    base = BoundParameters(b1=1.0, b2=2.0, beta=1.0, gamma=32.0, v1=1.0, ratio=100.0)
    t0 = time.perf_counter()
    sw = regime_sweep(base, np.linspace(0.05, 1.0, 20), range(1, 51), np.logspace(1, 7, 61), (1, 4, 10))
    secs = time.perf_counter() - t0
    bad = ~sw.consistent
    detail = f"{int(bad.sum())} of {len(sw)} sweep points have graph bound > time bound ({secs:.2f}s)"
    if bad.any():
        i = int(np.argmax(sw.graph / sw.time))
        detail += (f"; worst beta={sw.beta[i]:.2f} t={sw.t[i]} ratio={sw.ratio[i]:.3g}: "
                   f"{sw.graph[i]:.4g} > {sw.time[i]:.4g}; all failures have beta < 1: {bool((sw.beta[bad] < 1).all())}")
    record(acceptance_registry, "7", not bad.any() and secs < 1, detail)


def test_c08_assumption_audit(manifest, acceptance_registry):
    data, _, oracle = generate(DGP)
    rep = assumption_audit(data, oracle, manifest, seed=MASTER, n_predictors=100, draws=10_000)
    viol = {k: a.violations for k, a in rep.items()}
    record(acceptance_registry, "8", all(v == 0 for v in viol.values()),
           "violations " + ", ".join(f"{k}={v}" for k, v in viol.items()))


def test_c09_dependency_graph_tail(acceptance_registry):
    t0 = time.perf_counter()
    parts, ok = [], True
    for d in (1, 5):
        rep = janson_empirical_check(DgpConfig(graph_param=d), R=100_000, seed=MASTER)
        c = rep.counts()
        ok &= rep.passed
        parts.append(f"deg {d}: pass={c['pass']} vacuous={c['vacuous']} fail={c['fail']}")
    secs = time.perf_counter() - t0
    u = np.concatenate([[0.0], np.logspace(-8, 6, 9_999)])
    h_ok = bool(np.all(h(u) >= u * np.log1p(u) / 2 - 1e-15 * (1 + u)))
    record(acceptance_registry, "9", ok and h_ok and secs < 60,
           "; ".join(parts) + f"; h sweep on {len(u)} points {'ok' if h_ok else 'FAILED'}; {secs:.1f}s")


def _digest(d):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(d.iterdir()) if p.is_file()}


def test_c10_cli_determinism(tmp_path, acceptance_registry):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[experiment]\nseed = 77\nreplications = 5\njanson_draws = 20000\n\n"
                   "[dgp]\nunit_count = 100\ngraph_param = 5\nhorizon = 4\n")
    codes, same = [], []
    for k in ("a", "b"):
        sim, run, ver = tmp_path / k / "sim", tmp_path / k / "run", tmp_path / k / "verify"
        codes.append(main(["simulate", "--config", str(cfg), "--out", str(sim), "-q"]))
        codes.append(main(["run", "--config", str(cfg), "--panel", str(sim / "panel.csv"), "--graph",
                           str(sim / "graph.csv"), "--out", str(run), "-q"]))
        codes.append(main(["verify", "--config", str(cfg), "--out", str(ver), "-q"]))
    for sub in ("sim", "run", "verify"):
        same.append(_digest(tmp_path / "a" / sub) == _digest(tmp_path / "b" / sub))
    nfiles = sum(len(_digest(tmp_path / "a" / s)) for s in ("sim", "run", "verify"))
    record(acceptance_registry, "10", all(same) and codes == [0] * 6,
           f"{nfiles} files identical across reruns: {all(same)}; exit codes {codes}")


def test_c11_quadratic_lemma(acceptance_registry):
    rng = np.random.default_rng(11)
    a, b, c = (10.0 ** rng.uniform(-6, 6, (3, 10_000)))
    worst_res, worst_ineq = 0.0, -math.inf
    for ai, bi, ci in zip(a, b, c):
        p = quadratic_lemma_solve(ai, bi, ci)
        worst_res = max(worst_res, abs(ci - bi * math.sqrt(p) - ai * p) / ci)
        worst_ineq = max(worst_ineq, (ci * ci - (bi * bi + 2 * ai * ci) * p) / (ci * ci))
    record(acceptance_registry, "11", worst_res <= 1e-12 and worst_ineq <= 1e-12,
           f"max relative residual {worst_res:.2e}; max relative lemma excess {worst_ineq:.2e} over 10^4 triples")


def test_s1_high_ratio_bernstein(acceptance_registry):
    # At the default ratio |A|/deg(G) = 100 every bound cell is vacuous; an edgeless graph
    # with 5000 units gives ratio 5000, where the deviation bound becomes informative.
    dgp = DgpConfig(unit_count=5000, graph_param=1, horizon=5)
    m = manifest_for(dgp, J=len(DEFAULT_LIBRARY))
    res = run_replications(dgp, DEFAULT_LIBRARY, R=100, master_seed=MASTER)
    bern = bernstein_check(res, m)
    tail = tail_check(res, m, t_values=(2, 5))
    regime = regime_compare(bound_parameters_from_manifest(m, t=5)).regime
    cb, ct = bern.counts(), tail.counts()
    ok = bern.passed and tail.passed and cb["pass"] > 0 and regime is Regime.GRAPH_SHARPER
    record(acceptance_registry, "S1", ok,
           f"ratio 5000, R=100: deviation cells pass={cb['pass']} vacuous={cb['vacuous']} fail={cb['fail']}; "
           f"tail cells pass={ct['pass']} vacuous={ct['vacuous']} fail={ct['fail']}; regime at t=5 {regime.value}")
