"""File formats: experiment config (INI), panel CSV, graph CSV, JSON manifest, report CSVs.

Writers are deterministic: reals are written with ``repr`` (shortest round-trip
form), so write -> read -> write reproduces files byte for byte.
"""
from __future__ import annotations

import configparser
import csv
import io
import json
import re
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .core import DataError, DependencyGraph, PanelDataset, TimeSlice
from .ensemble import MetaMethod
from .learners import LearnerSpec
from .simulator import DgpConfig


class ConfigFileError(ValueError):
    """Bad experiment config; the message names the offending line when possible."""


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


# ---------------------------------------------------------------------------
# Experiment config
# ---------------------------------------------------------------------------

_DGP_FIELDS = [f.name for f in fields(DgpConfig) if f.name != "seed"]
_DGP_TUPLES = {"truth_coefficients", "declaration_parameters"}
_DGP_INTS = {"unit_count", "graph_param", "horizon", "n_covariates", "quantile_block", "summary_dim"}


def _default_learners() -> tuple:
    from .verify import DEFAULT_LIBRARY

    return DEFAULT_LIBRARY


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 20240101
    dgp: DgpConfig | None = field(default_factory=DgpConfig)
    panel_path: str = ""
    graph_path: str = ""
    outcome_bound: float = 1.0
    learners: tuple = field(default_factory=_default_learners)
    meta_method: MetaMethod = MetaMethod.SIMPLEX
    overarching: bool = False
    grid_K: int = 20
    n_restarts: int = 5
    replications: int = 200
    a: float = 1.0
    mc_draws: int = 20
    workers: int = 1
    t_values: tuple = (2, 5, 10)
    janson_draws: int = 100_000
    inject_seed_reuse: bool = False
    bound_overrides: tuple = ()  # sorted (key, value) pairs
    out: str = ""

    def __post_init__(self):
        object.__setattr__(self, "meta_method", MetaMethod(self.meta_method))
        if self.dgp is not None and self.dgp.seed != self.seed:
            object.__setattr__(self, "dgp", _replace_seed(self.dgp, self.seed))
        if not self.learners:
            raise ConfigFileError("the learner registry is empty")
        if self.replications < 1:
            raise ConfigFileError("replications must be >= 1")

    def with_seed(self, seed: int) -> "ExperimentConfig":
        from dataclasses import replace

        return replace(self, seed=int(seed))


def _replace_seed(dgp: DgpConfig, seed: int) -> DgpConfig:
    from dataclasses import replace

    return replace(dgp, seed=int(seed))


_SCHEMA = {
    "experiment": {"seed", "out", "replications", "a", "mc_draws", "workers", "t_values", "janson_draws", "inject_seed_reuse"},
    "dgp": set(_DGP_FIELDS),
    "data": {"panel", "graph", "outcome_bound"},
    "ensemble": {"meta_method", "overarching", "grid_K", "n_restarts"},
    "bounds": {"b1", "b2", "v1", "beta", "gamma", "N", "Nprime"},
}


def _line_of(text: str, section: str, key: str | None = None) -> int:
    lines = text.splitlines()
    current = None
    for i, line in enumerate(lines, start=1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return i
            continue
        if key is not None and current == section:
            m = re.match(r"\s*([^=:#;\s][^=:]*?)\s*[=:]", line)
            if m and m.group(1).strip() == key:
                return i
    return 0


def parse_config(text: str) -> ExperimentConfig:
    """Parse the INI experiment config strictly (unknown sections or keys are errors)."""
    cp = configparser.ConfigParser(interpolation=None, strict=True, empty_lines_in_values=False)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigFileError(str(exc).replace("\n", " ")) from exc

    def err(section, key, msg):
        line = _line_of(text, section, key)
        where = f"line {line}: " if line else ""
        return ConfigFileError(f"{where}[{section}] {key + ': ' if key else ''}{msg}")

    def get(section, key, conv, default):
        if not cp.has_option(section, key):
            return default
        raw = cp.get(section, key).strip()
        try:
            return conv(raw)
        except (ValueError, TypeError) as exc:
            raise err(section, key, f"cannot parse {raw!r} ({exc})") from None

    def as_bool(s):
        if s.lower() in ("true", "yes", "1", "on"):
            return True
        if s.lower() in ("false", "no", "0", "off"):
            return False
        raise ValueError("expected a boolean")

    def as_floats(s):
        return tuple(float(v) for v in s.split(",") if v.strip())

    def as_ints(s):
        return tuple(int(v) for v in s.split(",") if v.strip())

    learners = []
    for section in cp.sections():
        if section.startswith("learner."):
            lid = section[len("learner."):].strip()
            opts = dict(cp.items(section))
            family = opts.pop("family", None)
            if family is None:
                raise err(section, None, "missing 'family'")
            try:
                hp = {k: float(v) for k, v in opts.items()}
                learners.append(LearnerSpec(lid, family, hp))
            except ValueError as exc:
                bad = next((k for k in opts if k in str(exc)), None)
                raise err(section, bad, str(exc)) from None
            continue
        if section not in _SCHEMA:
            raise err(section, None, "unknown section")
        for key in cp.options(section):
            if key not in _SCHEMA[section]:
                raise err(section, key, "unknown key")

    kw = {}
    kw["seed"] = get("experiment", "seed", int, ExperimentConfig.seed)
    kw["out"] = get("experiment", "out", str, "")
    kw["replications"] = get("experiment", "replications", int, ExperimentConfig.replications)
    kw["a"] = get("experiment", "a", float, ExperimentConfig.a)
    kw["mc_draws"] = get("experiment", "mc_draws", int, ExperimentConfig.mc_draws)
    kw["workers"] = get("experiment", "workers", int, ExperimentConfig.workers)
    kw["t_values"] = get("experiment", "t_values", as_ints, ExperimentConfig.t_values)
    kw["janson_draws"] = get("experiment", "janson_draws", int, ExperimentConfig.janson_draws)
    kw["inject_seed_reuse"] = get("experiment", "inject_seed_reuse", as_bool, False)
    kw["meta_method"] = get("ensemble", "meta_method", MetaMethod, MetaMethod.SIMPLEX)
    kw["overarching"] = get("ensemble", "overarching", as_bool, False)
    kw["grid_K"] = get("ensemble", "grid_K", int, 20)
    kw["n_restarts"] = get("ensemble", "n_restarts", int, 5)
    overrides = {}
    for key in ("b1", "b2", "v1", "beta", "gamma"):
        v = get("bounds", key, float, None)
        if v is not None:
            overrides[key] = v
    for key in ("N", "Nprime"):
        v = get("bounds", key, int, None)
        if v is not None:
            overrides[key] = v
    kw["bound_overrides"] = tuple(sorted(overrides.items()))
    if learners:
        kw["learners"] = tuple(learners)

    if cp.has_section("data"):
        if cp.has_section("dgp"):
            raise err("data", None, "use either [dgp] or [data], not both")
        kw["dgp"] = None
        kw["panel_path"] = get("data", "panel", str, "")
        kw["graph_path"] = get("data", "graph", str, "")
        kw["outcome_bound"] = get("data", "outcome_bound", float, 1.0)
    else:
        dkw = {}
        for name in _DGP_FIELDS:
            if name in _DGP_TUPLES:
                conv = as_floats
            elif name in _DGP_INTS:
                conv = int
            elif name in ("graph_kind", "truth_kind", "declaration_kind"):
                conv = str
            else:
                conv = float
            v = get("dgp", name, conv, None)
            if v is not None:
                dkw[name] = v
        try:
            kw["dgp"] = DgpConfig(seed=kw["seed"], **dkw)
        except ValueError as exc:
            key, _, msg = str(exc).partition(": ")
            if key not in _DGP_FIELDS:
                key, msg = None, str(exc)
            raise err("dgp", key if key in dkw else None, msg) from None
        kw["outcome_bound"] = kw["dgp"].outcome_bound
    try:
        return ExperimentConfig(**kw)
    except ValueError as exc:
        raise ConfigFileError(str(exc)) from None


def emit_config(cfg: ExperimentConfig) -> str:
    """Serialise ``cfg``; ``parse_config(emit_config(cfg)) == cfg``."""
    out = ["[experiment]"]
    out.append(f"seed = {cfg.seed}")
    if cfg.out:
        out.append(f"out = {cfg.out}")
    for k in ("replications", "a", "mc_draws", "workers"):
        out.append(f"{k} = {fmt(getattr(cfg, k))}")
    out.append("t_values = " + ", ".join(str(t) for t in cfg.t_values))
    out.append(f"janson_draws = {cfg.janson_draws}")
    out.append(f"inject_seed_reuse = {fmt(cfg.inject_seed_reuse)}")
    out.append("")
    if cfg.dgp is not None:
        out.append("[dgp]")
        d = cfg.dgp.to_dict()
        for name in _DGP_FIELDS:
            v = d[name]
            if name in _DGP_TUPLES:
                out.append(f"{name} = " + ", ".join(fmt(float(x)) for x in v))
            else:
                out.append(f"{name} = {fmt(v)}")
    else:
        out.append("[data]")
        out.append(f"panel = {cfg.panel_path}")
        out.append(f"graph = {cfg.graph_path}")
        out.append(f"outcome_bound = {fmt(cfg.outcome_bound)}")
    out.append("")
    out.append("[ensemble]")
    out.append(f"meta_method = {cfg.meta_method.value}")
    out.append(f"overarching = {fmt(cfg.overarching)}")
    out.append(f"grid_K = {cfg.grid_K}")
    out.append(f"n_restarts = {cfg.n_restarts}")
    out.append("")
    if cfg.bound_overrides:
        out.append("[bounds]")
        for k, v in cfg.bound_overrides:
            out.append(f"{k} = {fmt(v)}")
        out.append("")
    for spec in cfg.learners:
        out.append(f"[learner.{spec.learner_id}]")
        out.append(f"family = {spec.family.value}")
        for k, v in spec.hyperparameters.items():
            out.append(f"{k} = {fmt(v)}")
        out.append("")
    return "\n".join(out)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigFileError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        return parse_config(text)
    except ConfigFileError as exc:
        raise ConfigFileError(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# Panel and graph CSV
# ---------------------------------------------------------------------------


def panel_to_csv(dataset: PanelDataset) -> str:
    s0 = dataset.slices[0]
    p, q = s0.z.shape[1], s0.x.shape[1]
    header = ["t", "alpha", "w", "y"] + [f"z_{k}" for k in range(1, p + 1)] + [f"x_{k}" for k in range(1, q + 1)]
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(header)
    for sl in dataset.slices:
        for i, uid in enumerate(sl.unit_ids):
            wr.writerow([sl.time_index, uid, int(sl.w[i]), fmt(float(sl.y[i]))]
                        + [fmt(float(v)) for v in sl.z[i]] + [fmt(float(v)) for v in sl.x[i]])
    return buf.getvalue()


def write_panel(dataset: PanelDataset, path) -> None:
    Path(path).write_text(panel_to_csv(dataset), encoding="utf-8")


def parse_panel(text: str, outcome_bound: float, source: str = "panel") -> PanelDataset:
    """Read a panel CSV; every violation raises :class:`DataError` naming the row and column."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise DataError(f"{source}: empty file")
    header = [h.strip() for h in rows[0]]
    if header[:4] != ["t", "alpha", "w", "y"]:
        raise DataError(f"{source}: header must start with t,alpha,w,y; got {','.join(header[:4])}")
    rest = header[4:]
    zs = [h for h in rest if h.startswith("z_")]
    xs = [h for h in rest if h.startswith("x_")]
    if rest != zs + xs or zs != [f"z_{k}" for k in range(1, len(zs) + 1)] or xs != [f"x_{k}" for k in range(1, len(xs) + 1)]:
        raise DataError(f"{source}: feature columns must be z_1..z_p then x_1..x_q")
    by_t: dict[int, dict] = {}
    order: dict[int, list] = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataError(f"{source}: row {lineno}: expected {len(header)} cells, got {len(row)}")
        for col, cell in zip(header, row):
            if cell.strip() == "":
                raise DataError(f"{source}: row {lineno}, column {col}: missing value")

        def num(col_idx, conv=float):
            try:
                v = conv(row[col_idx])
            except ValueError:
                raise DataError(f"{source}: row {lineno}, column {header[col_idx]}: cannot parse {row[col_idx]!r}") from None
            if conv is float and not np.isfinite(v):
                raise DataError(f"{source}: row {lineno}, column {header[col_idx]}: non-finite value")
            return v

        t = num(0, int)
        alpha = row[1]
        w = num(2, int)
        y = num(3)
        if w not in (0, 1):
            raise DataError(f"{source}: row {lineno}, column w: must be 0 or 1")
        if w == 0 and y != 0:
            raise DataError(f"{source}: row {lineno}, column y: must be 0 when w = 0")
        z = [num(4 + k) for k in range(len(zs))]
        x = [num(4 + len(zs) + k) for k in range(len(xs))]
        units = by_t.setdefault(t, {})
        if alpha in units:
            raise DataError(f"{source}: row {lineno}: duplicate (alpha={alpha}, t={t})")
        units[alpha] = (w, y, z, x)
        order.setdefault(t, []).append(alpha)
    if not by_t:
        raise DataError(f"{source}: no data rows")
    slices = []
    ids = tuple(order[min(by_t)])
    for t in sorted(by_t):
        if set(by_t[t]) != set(ids):
            raise DataError(f"{source}: unit set at t={t} differs from t={min(by_t)}")
        recs = [by_t[t][a] for a in ids]
        slices.append(TimeSlice(
            t, ids,
            np.array([r[0] for r in recs]), np.array([r[3] for r in recs]).reshape(len(ids), len(xs)),
            np.array([r[2] for r in recs]).reshape(len(ids), len(zs)), np.array([r[1] for r in recs]),
        ))
    return PanelDataset(tuple(slices), outcome_bound)


def read_panel(path, outcome_bound: float) -> PanelDataset:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read panel {path}: {exc.strerror}") from None
    return parse_panel(text, outcome_bound, source=p.name)


def graph_to_csv(graph: DependencyGraph, cliques: dict | None = None) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    if cliques is not None:
        wr.writerow(["alpha", "clique_id"])
        for v in graph.vertices:
            wr.writerow([v, cliques[v]])
    else:
        wr.writerow(["alpha_a", "alpha_b"])
        for a, b in graph.edges():
            wr.writerow([a, b])
    return buf.getvalue()


def parse_graph(text: str, unit_ids, source: str = "graph") -> tuple[DependencyGraph, dict | None]:
    """Read a graph CSV in edge or clique form, checked against ``unit_ids``."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise DataError(f"{source}: empty file")
    header = [h.strip() for h in rows[0]]
    known = set(unit_ids)
    body = [(i, r) for i, r in enumerate(rows[1:], start=2) if r]
    for lineno, r in body:
        if len(r) != 2 or not r[0].strip() or not r[1].strip():
            raise DataError(f"{source}: row {lineno}: expected two non-empty cells")
    if header == ["alpha", "clique_id"]:
        membership = {}
        for lineno, (a, c) in body:
            if a not in known:
                raise DataError(f"{source}: row {lineno}, column alpha: unknown unit {a!r}")
            if a in membership:
                raise DataError(f"{source}: row {lineno}: unit {a!r} listed twice")
            membership[a] = c
        for a in unit_ids:
            membership.setdefault(a, f"__singleton__{a}")
        membership = {a: membership[a] for a in unit_ids}
        return DependencyGraph.from_cliques(membership), membership
    if header == ["alpha_a", "alpha_b"]:
        edges = []
        for lineno, (a, b) in body:
            for col, v in (("alpha_a", a), ("alpha_b", b)):
                if v not in known:
                    raise DataError(f"{source}: row {lineno}, column {col}: unknown unit {v!r}")
            if a == b:
                raise DataError(f"{source}: row {lineno}: self-loop at {a!r}")
            edges.append((a, b))
        return DependencyGraph.from_edges(tuple(unit_ids), edges), None
    raise DataError(f"{source}: header must be 'alpha_a,alpha_b' or 'alpha,clique_id'")


def read_graph(path, unit_ids) -> tuple[DependencyGraph, dict | None]:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read graph {path}: {exc.strerror}") from None
    return parse_graph(text, unit_ids, source=p.name)


# ---------------------------------------------------------------------------
# Manifest and generic tables
# ---------------------------------------------------------------------------


def manifest_to_text(manifest: dict) -> str:
    return json.dumps(manifest, indent=2, sort_keys=True) + "\n"


def read_manifest(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: line {exc.lineno}: {exc.msg}") from None


def table_to_csv(rows, columns=None) -> str:
    rows = list(rows)
    if columns is None:
        columns = list(rows[0]) if rows else []
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(columns)
    for r in rows:
        wr.writerow([fmt(r[c]) for c in columns])
    return buf.getvalue()


def read_table(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
