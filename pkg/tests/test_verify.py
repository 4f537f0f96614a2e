import math

import numpy as np
import pytest

from onestep_sl.bounds import Regime, janson_bound, regime_compare
from onestep_sl.learners import LearnerSpec
from onestep_sl.simulator import DgpConfig, bound_parameters_from_manifest, manifest_for, replication_seed
from onestep_sl.verify import (
    DEFAULT_LIBRARY, VerificationError, argmin_violations, bernstein_check, default_manifest, default_x_grid,
    determinism_self_check, dominance_violations, expectation_check, janson_empirical_check, run_one,
    run_replications, summarize, tail_check, wilson_half_width,
)

SMALL = DgpConfig(unit_count=100, graph_param=5, horizon=5)
MEAN = (LearnerSpec("mean", "constant-mean"),)


@pytest.fixture(scope="module")
def small_runs():
    return run_replications(SMALL, DEFAULT_LIBRARY, R=40, master_seed=11)


class TestRunReplications:
    def test_single_learner_single_step(self):
        (r,) = run_replications(DgpConfig(unit_count=50, horizon=1), MEAN, R=1)
        assert r.excess_sl[0] == r.excess_oracle[0]

    def test_equal_seeds_identical(self):
        a, b = run_replications(SMALL, DEFAULT_LIBRARY, R=2, seeds=[5, 5])
        assert a.fingerprint() == b.fingerprint()

    def test_seeds_by_index(self, small_runs):
        assert [r.seed for r in small_runs[:3]] == [replication_seed(11, i) for i in range(3)]

    def test_noiseless_truth_learner(self):
        # a linear truth is reproduced exactly by least squares after one refit
        cfg = DgpConfig(unit_count=100, horizon=5, shared_noise=0.0, idiosyncratic_noise=0.0)
        specs = MEAN + (LearnerSpec("ols", "ordinary-least-squares"),)
        r = run_one(cfg, specs, seed=3)
        steps = np.arange(1, 6)
        cum = r.H_tilde * steps[:, None]
        per_step = np.diff(np.vstack([np.zeros(2), cum]), axis=0)  # excess of theta_{j,t-1} at time t
        for t in range(2, 6):
            assert r.selections[t - 1] == 1
            assert per_step[t - 1, r.selections[t - 1]] < 1e-6

    def test_failure_names_seed(self):
        bad = (LearnerSpec("k", "ks-knn", {"block_start": 50}),)
        with pytest.raises(VerificationError, match="seed 4"):
            run_replications(SMALL, bad, R=1, seeds=[4])

    def test_invariants(self, small_runs):
        assert argmin_violations(small_runs) == 0
        assert dominance_violations(small_runs) == 0
        for r in small_runs:
            assert np.all(r.excess_oracle >= -1e-9)
            assert np.all(r.excess_oracle[:, None] <= r.H_tilde + 1e-12)


class TestSelfCheck:
    def test_passes(self, small_runs):
        assert determinism_self_check(small_runs[:2], SMALL).passed

    def test_injected_seed_reuse(self):
        res = run_replications(SMALL, DEFAULT_LIBRARY, R=2, seeds=[9, 9])
        check = determinism_self_check(res, SMALL)
        assert not check.distinct_seeds and not check.passed


class TestWilson:
    def test_values(self):
        assert wilson_half_width(0.5, 100) == pytest.approx(0.0962, abs=1e-4)
        assert wilson_half_width(0.0, 100) > 0
        assert wilson_half_width(0.3, 0) == 1.0


class TestTail:
    def test_vacuous_cells_excluded(self, small_runs):
        rep = tail_check(small_runs, default_manifest(SMALL), t_values=(2, 5))
        assert rep.cells
        for c in rep.cells:
            assert (c.status == "vacuous") == (c.bound >= 1)
        assert rep.passed

    def test_monotone_frequencies(self, small_runs):
        m = default_manifest(SMALL)
        p = bound_parameters_from_manifest(m, t=5)
        grid = np.linspace(0.3, 1.0, 15)
        rep = tail_check(small_runs, m, x_grid=grid, t_values=(5,))
        f = [c.frequency for c in rep.cells]
        assert f == sorted(f, reverse=True)
        assert p.b1 == 1.0

    def test_beyond_max_gap(self, small_runs):
        gaps = [r.excess_sl[1] - 3 * r.excess_oracle[1] for r in small_runs]
        rep = tail_check(small_runs, default_manifest(SMALL), x_grid=[max(gaps) * 1.5 + 0.5], t_values=(2,))
        assert rep.cells[0].frequency == 0

    def test_small_ratio_instance(self):
        cfg = DgpConfig(unit_count=10, graph_param=1, horizon=50)
        res = run_replications(cfg, MEAN + (LearnerSpec("ols", "ordinary-least-squares"),), R=10, master_seed=2)
        m = default_manifest(cfg, J=2)
        assert m["ratio"] == 10
        assert regime_compare(bound_parameters_from_manifest(m, t=50)).regime is Regime.TIME_SHARPER
        rep = tail_check(res, m, t_values=(50,))
        for c in rep.cells:
            assert c.regime == "time-sharper"
            assert c.graph_bound == 1.0
            assert c.time_bound <= c.graph_bound

    def test_grid(self):
        g = default_x_grid(0.01, [0.5, 0.2], 5)
        assert g[0] == pytest.approx(0.01) and g[-1] == pytest.approx(0.75)
        assert np.all(np.diff(np.log(g)) > 0)


class TestExpectation:
    def test_single_learner_nonpositive(self):
        res = run_replications(SMALL, MEAN, R=5)
        rep = expectation_check(res, default_manifest(SMALL, J=1))
        for row in rep.rows_:
            assert row.mean <= 0 <= row.bound
        assert rep.passed

    def test_high_ratio_graph_binding(self):
        m = manifest_for(DgpConfig(unit_count=5000, graph_param=1, horizon=5), J=4)
        assert m["ratio"] == 5000
        p = bound_parameters_from_manifest(m, t=5)
        assert regime_compare(p).regime is Regime.GRAPH_SHARPER

    def test_stability_under_doubling(self, small_runs):
        m = default_manifest(SMALL)
        a = expectation_check(small_runs[:20], m, t_values=(5,)).rows_[0]
        b = expectation_check(small_runs, m, t_values=(5,)).rows_[0]
        assert abs(a.mean - b.mean) < 3 * math.hypot(a.se, b.se)

    def test_default_passes(self, small_runs):
        assert expectation_check(small_runs, default_manifest(SMALL)).passed


class TestBernstein:
    def test_zero_vacuous(self, small_runs):
        rep = bernstein_check(small_runs, default_manifest(SMALL), x_grid=[0.0], t_values=(2,))
        assert all(c.status == "vacuous" for c in rep.cells)

    def test_var_tilde(self, small_runs):
        rep = bernstein_check(small_runs, default_manifest(SMALL), t_values=(5,))
        assert rep.var_tilde_violations == 0 and rep.var_tilde_max <= rep.v2
        assert rep.passed


class TestJanson:
    def test_zero_x(self):
        rep = janson_empirical_check(DgpConfig(unit_count=100, graph_param=1), R=2000, x_grid=[0.0])
        assert rep.cells[0].bound == 1.0 and rep.cells[0].status == "vacuous"

    def test_edgeless_holds(self):
        rep = janson_empirical_check(DgpConfig(unit_count=100, graph_param=1), R=20_000)
        assert rep.passed and rep.deg == 1

    def test_clique_size_direction(self):
        reps = {d: janson_empirical_check(DgpConfig(unit_count=100, graph_param=d, shared_noise=0.15,
                                                    idiosyncratic_noise=0.05), R=20_000, seed=1) for d in (2, 4)}
        x = 0.01
        b2_, b4_ = (janson_bound(100, d, reps[d].V, reps[d].B, x) for d in (2, 4))
        assert b4_ >= b2_  # larger cliques give a weaker bound
        assert reps[4].sd > reps[2].sd  # and a wider empirical spread


def test_summary_text(small_runs):
    m = default_manifest(SMALL)
    text = summarize({"tail": tail_check(small_runs, m, t_values=(2,)), "expectation": expectation_check(small_runs, m)})
    assert text.splitlines()[-1].startswith("total")
