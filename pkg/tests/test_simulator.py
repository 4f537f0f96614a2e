import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from onestep_sl.bounds import v2
from onestep_sl.core import degree_plus_one
from onestep_sl.learners import LearnerSpec, PredictorSnapshot, refit
from onestep_sl.simulator import (
    ConfigError, DgpConfig, bound_parameters_from_manifest, build_graph, empirical_assumption_audit, generate,
    manifest_for, oracle_conditional_risk, oracle_select, replication_seed, splitmix64,
)

NOISELESS = dict(shared_noise=0.0, idiosyncratic_noise=0.0)


def const(c):
    return lambda F: np.full(len(F), float(c))


class TestSeeds:
    def test_splitmix_reference(self):
        # first output of the reference generator seeded with 0
        assert splitmix64(0) == 0xE220A8397B1DCDAF

    def test_distinct(self):
        seeds = {replication_seed(7, i) for i in range(10000)}
        assert len(seeds) == 10000
        assert replication_seed(7, 3) == replication_seed(7, 3)


class TestConfig:
    def test_clique_divides(self):
        with pytest.raises(ConfigError, match="graph_param"):
            DgpConfig(unit_count=10, graph_param=3)

    def test_clipping_rejected(self):
        with pytest.raises(ConfigError, match="truth_coefficients"):
            DgpConfig(truth_coefficients=(0.05, 0.2, 0.1, 0.15))

    def test_coefficient_count(self):
        with pytest.raises(ConfigError, match="truth_coefficients"):
            DgpConfig(truth_coefficients=(0.3, 0.2))

    def test_declaration(self):
        with pytest.raises(ConfigError):
            DgpConfig(declaration_kind="constant", declaration_parameters=(1.5,))

    def test_lattice(self):
        cfg = DgpConfig(unit_count=20, graph_kind="lattice-radius", graph_param=2)
        g, L = build_graph(cfg)
        assert degree_plus_one(g) == 5
        assert np.allclose(np.asarray(L.sum(1)).ravel(), 1.0)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0, 0.3), st.floats(0, 0.3), st.integers(0, 2**32), st.sampled_from(["linear", "piecewise"]))
    def test_outcomes_in_range(self, sc, si, seed, kind):
        lo = sc + si
        coef = (lo, 0.1, 0.05, 0.1)
        try:
            cfg = DgpConfig(unit_count=30, graph_param=3, horizon=2, shared_noise=sc, idiosyncratic_noise=si,
                            truth_coefficients=coef, truth_kind=kind, seed=seed)
        except ConfigError:
            return
        data, _, _ = generate(cfg)
        for s in data:
            assert s.y.min() >= 0 and s.y.max() <= 1


class TestGenerate:
    def test_noiseless(self):
        data, _, oracle = generate(DgpConfig(unit_count=50, horizon=3, **NOISELESS))
        for s in data:
            assert np.array_equal(s.y, np.where(s.w == 1, oracle.theta_star(s.features), 0.0))

    def test_edgeless(self):
        _, g, _ = generate(DgpConfig(unit_count=20, graph_param=1, horizon=1))
        assert degree_plus_one(g) == 1 and not g.edges()

    def test_deterministic(self):
        a, _, _ = generate(DgpConfig(unit_count=25, horizon=4))
        b, _, _ = generate(DgpConfig(unit_count=25, horizon=4))
        for s, u in zip(a, b):
            for f in ("w", "x", "z", "y"):
                assert getattr(s, f).tobytes() == getattr(u, f).tobytes()
        c, _, _ = generate(DgpConfig(unit_count=25, horizon=4, seed=1))
        assert c.slices[0].y.tobytes() != a.slices[0].y.tobytes()

    def test_conditional_mean_slope(self):
        cfg = DgpConfig(unit_count=1000, horizon=1)
        _, _, oracle = generate(cfg)
        rng = np.random.default_rng(42)
        ts, ys = [], []
        while sum(map(len, ys)) < 100_000:
            s = oracle.draw_slice(rng, 1)
            d = s.w == 1
            ts.append(oracle.theta_star(s.features)[d])
            ys.append(s.y[d])
        t, y = np.concatenate(ts)[:100_000], np.concatenate(ys)[:100_000]
        slope = np.polyfit(t, y, 1)[0]
        assert 0.99 <= slope <= 1.01


class TestDependence:
    R = 10_000

    def _losses(self, cfg, units, seed=3):
        _, _, oracle = generate(cfg)
        rng = np.random.default_rng(seed)
        z = np.full((cfg.unit_count, 1), 0.5)
        out = np.empty((self.R, len(units)))
        for r in range(self.R):
            s = oracle.draw_slice(rng, 1, z)
            out[r] = (s.y[units] - 0.3) ** 2 * s.w[units]
        return out

    def test_cross_clique_uncorrelated(self):
        cfg = DgpConfig(unit_count=10, graph_param=5, horizon=1)
        L = self._losses(cfg, [0, 5])
        assert abs(np.corrcoef(L.T)[0, 1]) <= 4 / math.sqrt(self.R)

    def test_within_clique_correlated(self):
        cfg = DgpConfig(unit_count=10, graph_param=5, horizon=1, truth_coefficients=(0.5, 0, 0, 0),
                        declaration_kind="constant", declaration_parameters=(1.0,), shared_noise=0.2,
                        idiosyncratic_noise=0.2)
        L = self._losses(cfg, [0, 1])
        assert np.corrcoef(L.T)[0, 1] >= 0.05


class TestOracleRisk:
    def test_theta_star_noiseless(self):
        _, _, oracle = generate(DgpConfig(unit_count=20, **NOISELESS))
        est = oracle_conditional_risk(oracle, oracle.theta_star, np.random.default_rng(0).random((20, 1)))
        assert est.value == 0

    def test_theta_star_noise_closed_form(self):
        cfg = DgpConfig(unit_count=10, graph_param=5, declaration_kind="constant", declaration_parameters=(0.7,),
                        shared_noise=0.1, idiosyncratic_noise=0.15)
        _, _, oracle = generate(cfg)
        z = np.full((10, 1), 0.5)
        closed = 0.7 * (0.1**2 + 0.15**2) / 3
        assert oracle_conditional_risk(oracle, oracle.theta_star, z).value == pytest.approx(closed, rel=1e-12)
        mc = oracle_conditional_risk(oracle, oracle.theta_star, z, mc_samples=10**6,
                                     rng=np.random.default_rng(1), method="monte-carlo")
        assert abs(mc.value - closed) <= 3 * mc.se

    def test_zero_predictor(self):
        cfg = DgpConfig(unit_count=10, truth_coefficients=(0.4, 0, 0, 0), declaration_kind="constant",
                        declaration_parameters=(1.0,), **NOISELESS)
        _, _, oracle = generate(cfg)
        assert oracle_conditional_risk(oracle, const(0), np.zeros((10, 1))).value == pytest.approx(0.16)

    @pytest.mark.parametrize("seed", range(5))
    def test_semi_analytic_matches_monte_carlo(self, seed):
        data, _, oracle = generate(DgpConfig(unit_count=50, horizon=2, seed=seed))
        snap = refit(LearnerSpec("r", "ridge", {"penalty": float(seed)}), data.slices[:1], 1.0)
        z = data.slices[1].z
        a = oracle_conditional_risk(oracle, snap, z, 20_000, np.random.default_rng(seed))
        b = oracle_conditional_risk(oracle, snap, z, 20_000, np.random.default_rng(seed + 100), "monte-carlo")
        assert abs(a.value - b.value) <= 4 * math.hypot(a.se, b.se)


class TestOracleSelect:
    def test_single_learner(self):
        data, _, oracle = generate(DgpConfig(unit_count=20, horizon=3))
        traj = [(PredictorSnapshot("m", t, 1.0),) for t in range(3)]
        sel = oracle_select(oracle, traj, [s.z for s in data], 3, 2000)
        assert sel.index == 0

    def test_truth_beats_zero(self):
        data, _, oracle = generate(DgpConfig(unit_count=20, horizon=4))
        traj = [(const(0), oracle.theta_star)] * 4
        for t in range(1, 5):
            sel = oracle_select(oracle, traj, [s.z for s in data], t, 2000)
            assert sel.index == 1
            assert sel.risks[1] == pytest.approx(sel.optimal_risk)  # zero excess for theta_star

    def test_incomplete(self):
        data, _, oracle = generate(DgpConfig(unit_count=20, horizon=2))
        with pytest.raises(ValueError, match="incomplete"):
            oracle_select(oracle, [(const(0),)], [s.z for s in data], 2)


class TestManifest:
    def test_constants(self):
        m = manifest_for(DgpConfig(), J=4)
        assert (m["b1"], m["b2"], m["v1"], m["beta"], m["gamma"]) == (1, 2, 1, 1, 32)
        assert m["deg"] == 5 and m["ratio"] == 100
        p = bound_parameters_from_manifest(m, t=5)
        assert p.t == 5 and p.J == 4 and p.N >= 2


class TestAudit:
    def test_noiseless_truth(self):
        cfg = DgpConfig(unit_count=20, horizon=2, **NOISELESS)
        data, _, oracle = generate(cfg)
        rep = empirical_assumption_audit(data, oracle, bound_parameters_from_manifest(manifest_for(cfg)),
                                         predictors=[oracle.theta_star], draws=2000)
        assert all(c.passed for c in rep.values())
        assert rep["b1"].statistic == 0

    def test_zero_predictor_hits_envelope(self):
        cfg = DgpConfig(unit_count=10, truth_coefficients=(1.0, 0, 0, 0), declaration_kind="constant",
                        declaration_parameters=(1.0,), **NOISELESS)
        data, _, oracle = generate(cfg)
        params = bound_parameters_from_manifest(manifest_for(cfg))
        rep = empirical_assumption_audit(data, oracle, params, predictors=[const(0)], draws=1000)
        assert rep["b1"].statistic == params.b1 == 1.0
        assert rep["b1"].passed

    def test_default_no_violations_small(self):
        cfg = DgpConfig()
        data, _, oracle = generate(cfg)
        params = bound_parameters_from_manifest(manifest_for(cfg))
        rep = empirical_assumption_audit(data, oracle, params, n_predictors=20, draws=2000)
        assert all(c.violations == 0 for c in rep.values())
        assert rep["v2"].limit == pytest.approx(v2(params))
