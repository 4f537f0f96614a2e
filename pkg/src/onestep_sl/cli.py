"""Command-line interface: ``onestep-sl {simulate,run,bounds,verify,report}``.

Exit codes: 0 success, 1 verification failure, 2 input error.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import bounds as bd
from . import verify as vf
from .core import DataError, degree_plus_one
from .ensemble import MetaMethod, init_overarching, init_state, overarching_step, step
from .formats import (
    ConfigFileError, ExperimentConfig, graph_to_csv, load_config, manifest_to_text, panel_to_csv,
    read_graph, read_manifest, read_panel, read_table, table_to_csv,
)
from .simulator import ConfigError, OracleHandle, generate, manifest_for

log = logging.getLogger("onestep_sl")

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2


class InputError(Exception):
    pass


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out_dir(args, cfg: ExperimentConfig | None = None) -> Path:
    out = args.out or (cfg.out if cfg else "") or "."
    return Path(out)


def _say(args, msg: str) -> None:
    if not args.quiet:
        print(msg)


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = _config(args)
    if cfg.dgp is None:
        raise InputError("simulate needs a [dgp] section")
    data, graph, _ = generate(cfg.dgp)
    out = _out_dir(args, cfg)
    cliques = None
    if cfg.dgp.graph_kind.value == "disjoint-cliques":
        d = cfg.dgp.graph_param
        cliques = {u: f"c{i // d}" for i, u in enumerate(graph.vertices)}
    manifest = manifest_for(cfg.dgp, J=len(cfg.learners), a=cfg.a)
    manifest["dgp"] = cfg.dgp.to_dict()
    _write(out / "panel.csv", panel_to_csv(data))
    _write(out / "graph.csv", graph_to_csv(graph, cliques))
    _write(out / "manifest.json", manifest_to_text(manifest))
    _say(args, f"wrote {data.unit_count * data.horizon} panel rows to {out / 'panel.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


def _oracle_from_manifest(manifest_path: Path, data) -> OracleHandle | None:
    """Rebuild the oracle when the panel provably came from the manifest's generator."""
    from .simulator import DgpConfig

    m = read_manifest(manifest_path)
    if "dgp" not in m:
        return None
    dgp = DgpConfig(**m["dgp"])
    regenerated, graph, oracle = generate(dgp)
    same = regenerated.unit_ids == data.unit_ids and all(
        np.array_equal(a.y, b.y) and np.array_equal(a.x, b.x) and np.array_equal(a.z, b.z) and np.array_equal(a.w, b.w)
        for a, b in zip(regenerated.slices, data.slices)
    ) and regenerated.horizon == data.horizon
    if not same:
        log.warning("panel does not match the manifest's generator; skipping oracle trajectory")
        return None
    return oracle


def cmd_run(args) -> int:
    cfg = _config(args)
    panel = args.panel or cfg.panel_path
    graph_path = args.graph or cfg.graph_path
    if not panel or not graph_path:
        raise InputError("run needs --panel and --graph (or a [data] section)")
    bound = cfg.outcome_bound if cfg.dgp is None else cfg.dgp.outcome_bound
    manifest_path = Path(args.manifest) if args.manifest else Path(panel).with_name("manifest.json")
    if manifest_path.exists() and args.outcome_bound is None and cfg.dgp is None:
        bound = float(read_manifest(manifest_path).get("B", bound))
    if args.outcome_bound is not None:
        bound = args.outcome_bound
    data = read_panel(panel, bound)
    graph, _ = read_graph(graph_path, data.unit_ids)
    oracle = _oracle_from_manifest(manifest_path, data) if manifest_path.exists() else None

    state = init_state(cfg.learners, bound, cfg.meta_method, cfg.grid_K, cfg.n_restarts, seed=cfg.seed & 0xFFFFFFFF)
    ostate = None
    if cfg.overarching:
        inner = [init_state(cfg.learners, bound, m, cfg.grid_K, cfg.n_restarts, seed=cfg.seed & 0xFFFFFFFF) for m in MetaMethod]
        ostate = init_overarching(inner, [m.value for m in MetaMethod])
    traj, preds, orows, overrows = [], [], [], []
    ids = state.learner_ids
    ex_cum = np.zeros(len(ids))
    opt_cum = 0.0
    for sl in data.slices:
        t = sl.time_index
        P = state.predictions(sl)
        sl_pred = state.predict(sl)
        if oracle is not None:
            ex, _, _, _ = vf.oracle_slice_step(oracle, state.snapshots, sl.z, [cfg.seed & 0xFFFFFFFF, t], cfg.mc_draws)
            ex_cum += ex
            opt_cum += oracle.optimal_risk(sl.z)
        for i, uid in enumerate(sl.unit_ids):
            row = {"t": t, "alpha": uid, "w": int(sl.w[i]), "y": float(sl.y[i]), "sl_prediction": float(sl_pred[i])}
            row.update({f"pred_{lid}": float(P[i, j]) for j, lid in enumerate(ids)})
            preds.append(row)
        state = step(state, sl)
        risks = state.ledger.empirical_risks()
        w = state.weights[-1]
        for j, lid in enumerate(ids):
            traj.append({"t": t, "learner_id": lid, "empirical_risk": float(risks[j]),
                         "selected_flag": int(state.selections[-1] == j), "weight": float(w[j])})
        if oracle is not None:
            h = ex_cum / t
            jt = int(np.argmin(h))
            for j, lid in enumerate(ids):
                orows.append({"t": t, "learner_id": lid, "oracle_risk": float(h[j] + opt_cum / t),
                              "excess_risk": float(h[j]), "oracle_selected_flag": int(j == jt),
                              "optimal_risk": opt_cum / t})
        if ostate is not None:
            ostate = overarching_step(ostate, sl)
            orisks = ostate.ledger.empirical_risks()
            for k, name in enumerate(ostate.ledger.learner_ids):
                overrows.append({"t": t, "inner": name, "empirical_risk": float(orisks[k]),
                                 "selected_flag": int(ostate.pick == k), "nnls_weight": float(ostate.weights[k])})
    out = _out_dir(args, cfg)
    _write(out / "trajectory.csv", table_to_csv(traj, ["t", "learner_id", "empirical_risk", "selected_flag", "weight"]))
    _write(out / "predictions.csv", table_to_csv(preds))
    if orows:
        _write(out / "oracle_trajectory.csv", table_to_csv(orows))
    if overrows:
        _write(out / "overarching.csv", table_to_csv(overrows))
    _say(args, f"ran {data.horizon} steps over {len(ids)} learners (deg(G) = {degree_plus_one(graph)}); outputs in {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# bounds
# ---------------------------------------------------------------------------


def _params_from_manifest(m: dict, t: int | None):
    from .simulator import bound_parameters_from_manifest

    needed = {"b1", "b2", "v1", "beta", "gamma"}
    missing = needed - set(m)
    if missing or not ("ratio" in m or {"unit_count", "deg"} <= set(m)):
        raise InputError(f"manifest lacks {sorted(missing) or ['ratio']}")
    try:
        return bound_parameters_from_manifest(m, t=t)
    except (bd.ParameterError, TypeError, ValueError) as exc:
        raise InputError(f"invalid bound parameters: {exc}") from None


def cmd_bounds(args) -> int:
    if args.manifest:
        m = read_manifest(args.manifest)
    elif args.config:
        cfg = _config(args)
        if cfg.dgp is None:
            raise InputError("bounds needs a manifest or a [dgp] config")
        m = manifest_for(cfg.dgp, J=len(cfg.learners), a=cfg.a)
        m.update(dict(cfg.bound_overrides))
    else:
        raise InputError("bounds needs --manifest or --config")
    p = _params_from_manifest(m, args.t)
    table = bd.constants_table(p)
    table = {"t": p.t, "J": p.J, "a": p.a, "N": p.N, "N'": p.Nprime, **table}
    if args.format == "csv":
        text = table_to_csv([{"name": k, "value": v} for k, v in table.items()], ["name", "value"])
    else:
        width = max(len(k) for k in table)
        text = "".join(f"{k:<{width}}  {_show(v)}\n" for k, v in table.items())
    if args.out:
        _write(Path(args.out) / "bounds.csv", table_to_csv([{"name": k, "value": v} for k, v in table.items()], ["name", "value"]))
    if not args.quiet:
        sys.stdout.write(text)
    return EXIT_OK


def _show(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------


def cmd_verify(args) -> int:
    cfg = _config(args)
    if cfg.dgp is None:
        raise InputError("verify needs a [dgp] section")
    dgp = cfg.dgp
    seeds = vf.replication_seeds(cfg.seed, cfg.replications)
    if cfg.inject_seed_reuse and len(seeds) > 1:
        seeds[1] = seeds[0]
    results = vf.run_replications(dgp, cfg.learners, cfg.replications, cfg.seed, cfg.meta_method.value,
                                  cfg.mc_draws, cfg.workers, seeds=seeds)
    check = vf.determinism_self_check(results, dgp, cfg.learners, cfg.meta_method.value, cfg.mc_draws)
    manifest = manifest_for(dgp, J=len(cfg.learners), a=cfg.a)
    manifest.update(dict(cfg.bound_overrides))
    tail = vf.tail_check(results, manifest, t_values=cfg.t_values, a=cfg.a)
    expect = vf.expectation_check(results, manifest, t_values=cfg.t_values, a=cfg.a)
    bern = vf.bernstein_check(results, manifest, t_values=cfg.t_values)
    janson = vf.janson_empirical_check(dgp, R=cfg.janson_draws, seed=cfg.seed)
    data, _, oracle = generate(dgp)
    audit = vf.assumption_audit(data, oracle, manifest, seed=cfg.seed)
    argmin_viol = vf.argmin_violations(results)

    out = _out_dir(args, cfg)
    _write(out / "tail_report.csv", table_to_csv([c.row() for c in tail.cells]))
    _write(out / "expectation_report.csv", table_to_csv(list(expect.rows())))
    _write(out / "bernstein_report.csv", table_to_csv([c.row() for c in bern.cells]))
    _write(out / "janson_report.csv", table_to_csv([c.row() for c in janson.cells]))
    _write(out / "audit_report.csv", table_to_csv([
        {"check": k, "statistic": a.statistic, "limit": a.limit, "violations": a.violations, "cases": a.cases}
        for k, a in audit.items()
    ]))
    reports = {"tail": tail, "expectation": expect, "deviation": bern, "janson": janson}
    audit_fail = sum(a.violations for a in audit.values())
    failures = sum(r.counts()["fail"] for r in reports.values()) + bern.var_tilde_violations + audit_fail + argmin_viol
    low_power = cfg.replications < 30
    lines = [
        f"replications: {cfg.replications}{' (low power: intervals are wide)' if low_power else ''}",
        f"master seed: {cfg.seed}",
        f"ratio |A|/deg(G): {manifest['ratio']:g}",
        vf.summarize(reports),
        f"var_tilde <= v2 violations: {bern.var_tilde_violations} (max {bern.var_tilde_max:.6g} vs v2 {bern.v2:.6g})",
        f"argmin violations: {argmin_viol}",
        f"assumption audit violations: {audit_fail}",
        f"determinism self-check: {'pass' if check.passed else 'FAIL'}"
        f" (distinct seeds: {check.distinct_seeds}, replay identical: {check.reproducible})",
    ]
    ok = failures == 0 and check.passed
    lines.append(f"verdict: {'PASS' if ok else 'FAIL'}")
    summary = "\n".join(lines) + "\n"
    _write(out / "summary.txt", summary)
    if not args.quiet:
        sys.stdout.write(summary)
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    traj_path, pred_path = run_dir / "trajectory.csv", run_dir / "predictions.csv"
    for p in (traj_path, pred_path):
        if not p.exists():
            raise InputError(f"missing run output {p}")
    traj = read_table(traj_path)
    preds = read_table(pred_path)
    learners = list(dict.fromkeys(r["learner_id"] for r in traj))
    times = sorted({int(r["t"]) for r in traj})
    W = {(int(r["t"]), r["learner_id"]): float(r["weight"]) for r in traj}
    weight_rows = [{"t": t, **{lid: W[(t, lid)] for lid in learners}} for t in times]
    pred_sum = {t: 0.0 for t in times}
    real_sum = {t: 0.0 for t in times}
    for r in preds:
        t = int(r["t"])
        if int(r["w"]) == 1:
            pred_sum[t] += float(r["sl_prediction"])
            real_sum[t] += float(r["y"])
    cost_rows, ratios = [], []
    for t in times:
        ratio = 100.0 * pred_sum[t] / real_sum[t] if real_sum[t] > 0 else math.nan
        cost_rows.append({"t": t, "predicted_total": pred_sum[t], "actual_total": real_sum[t], "ratio_percent": ratio})
        if t > args.burn_in and not math.isnan(ratio):
            ratios.append(ratio)
    stats = {
        "burn_in": args.burn_in,
        "n_times": len(ratios),
        "mean_ratio_percent": float(np.mean(ratios)) if ratios else math.nan,
        "min_ratio_percent": float(np.min(ratios)) if ratios else math.nan,
        "max_ratio_percent": float(np.max(ratios)) if ratios else math.nan,
    }
    out = Path(args.out) if args.out else run_dir
    _write(out / "weights_matrix.csv", table_to_csv(weight_rows, ["t"] + learners))
    _write(out / "costs.csv", table_to_csv(cost_rows, ["t", "predicted_total", "actual_total", "ratio_percent"]))
    _write(out / "ratio_summary.csv", table_to_csv([stats], list(stats)))
    _say(args, f"mean predicted/actual ratio after burn-in {args.burn_in}: {stats['mean_ratio_percent']:.2f}%")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed (overrides the config)")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--config", default=argparse.SUPPRESS, help="experiment config (INI)")
    common.add_argument("-q", "--quiet", action="store_true", default=argparse.SUPPRESS, help="suppress stdout")

    parser = argparse.ArgumentParser(prog="onestep-sl", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default=None)
    parser.add_argument("--config", default=None)
    parser.add_argument("-q", "--quiet", action="store_true", default=False)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", parents=[common], help="draw a synthetic panel, graph and manifest")
    p = sub.add_parser("run", parents=[common], help="run the sequential Super Learner on a panel")
    p.add_argument("--panel")
    p.add_argument("--graph")
    p.add_argument("--manifest", help="simulation manifest (default: manifest.json next to the panel)")
    p.add_argument("--outcome-bound", type=float, default=None)
    p = sub.add_parser("bounds", parents=[common], help="print every bound constant for a manifest")
    p.add_argument("--manifest")
    p.add_argument("--t", type=int, default=None, help="time index (default: the manifest horizon)")
    p.add_argument("--format", choices=("text", "csv"), default="text")
    sub.add_parser("verify", parents=[common], help="Monte Carlo verification of the bounds")
    p = sub.add_parser("report", parents=[common], help="weight-trajectory and cost-ratio tables from run outputs")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--burn-in", type=int, default=0, help="ignore t <= burn-in in ratio statistics")
    return parser


COMMANDS = {"simulate": cmd_simulate, "run": cmd_run, "bounds": cmd_bounds, "verify": cmd_verify, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (InputError, ConfigFileError, ConfigError, DataError, bd.ParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except vf.VerificationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
