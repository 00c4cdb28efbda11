"""Contingency benchmark harness: N-1 / N-2 runs, MAE tables, solve budgets."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .acpf import (
    SOLVES,
    base_topology,
    enumerate_feasible,
    generate_dataset,
    rng_for,
    sample_injections,
    solve_category,
    stream_seed,
)
from .errors import DatasetError, ValidationError
from .gpr import mae
from .netcase import GridCase, load_case
from .pve import PveConfig, build_envelopes
from .transfer import SOURCE_SETS, SourceRegistry, train_full_gp, train_htl, train_mt, train_sources, train_vdk

log = logging.getLogger(__name__)

METHODS = ("full_gp", "vdk", "htl", "mt_vdk")
RESULT_HEADER = ["node", "topology", "method", "n_train", "mae_pu", "lml", "wall_s", "solves"]
DEFAULT_AREA_CUTOFFS = (10e-4, 5e-4, 2.5e-4)
MCS_SAMPLES = 1000

# reference solve budgets per contingency class on case30
REFERENCE_BUDGET = {
    "N-1": {"mcs": 38000, "vdk": 3900, "mt_vdk": 2380},
    "N-2": {"mcs": 356000, "vdk": 35700, "mt_vdk": 21460},
}


@dataclass(frozen=True)
class ExperimentPlan:
    case: str = "case30"
    methods: tuple[str, ...] = ("vdk", "htl", "mt_vdk")
    sources: str | tuple[int, ...] = "A"
    k: int = 1
    nodes: tuple[int, ...] = (4,)
    n_train: int = 60
    iters: int = 50
    n_test: int = 500
    seed: int = 7
    topologies: int | None = 10
    fraction: float = 0.1
    source_samples: int = 512
    source_iters: int = 50
    shared_pool: int = 100
    per_source_weights: bool = False
    include_sources: bool = False
    timing: bool = False
    threads: int = 1
    preset: str = ""

    def __post_init__(self):
        for m in self.methods:
            if m not in METHODS:
                raise ValidationError(f"unknown method {m!r}; choose from {METHODS}")
        if self.k not in (1, 2):
            raise ValidationError("contingency order k must be 1 or 2")
        if self.n_train < 2 or self.n_test < 1:
            raise ValidationError("need n_train >= 2 and n_test >= 1")
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "nodes", tuple(int(n) for n in self.nodes))

    @property
    def source_outages(self) -> tuple[int, ...]:
        if isinstance(self.sources, str):
            if self.sources not in SOURCE_SETS:
                raise ValidationError(f"unknown source set {self.sources!r}")
            return SOURCE_SETS[self.sources]
        return tuple(self.sources)

    @property
    def needs_sources(self) -> bool:
        return any(m in ("htl", "mt_vdk") for m in self.methods)


@dataclass(frozen=True)
class ResultRow:
    node: int
    topology_label: str
    method: str
    n_train: int
    mae: float
    lml: float
    wall_time: float | None
    solves: int

    def __post_init__(self):
        if not self.mae >= 0:
            raise ValidationError(f"MAE must be non-negative, got {self.mae}")


@dataclass
class BenchResult:
    plan: ExperimentPlan
    rows: list[ResultRow]
    topologies: list[str]
    solves: dict[str, int]
    pool_mae: dict[int, float] = field(default_factory=dict)

    @property
    def contingency(self) -> str:
        return f"N-{self.plan.k}"


# --------------------------------------------------------------------------


def _resolve_case(plan: ExperimentPlan, case: GridCase | None) -> GridCase:
    case = load_case(plan.case) if case is None else case
    known = set(case.branch_ids)
    for b in plan.source_outages:
        if b not in known:
            raise ValidationError(f"source branch {b} does not exist in the case")
    return case


def select_topologies(case: GridCase, plan: ExperimentPlan, exclude=()) -> list:
    """Feasible k-outage topologies minus sources, optionally a seeded subset."""
    with solve_category("feasibility"):
        feasible = [t for t in enumerate_feasible(case, plan.k) if t.label not in set(exclude)]
    if plan.topologies is None or plan.topologies >= len(feasible):
        return feasible
    rng = rng_for(plan.seed, "topologies", plan.k)
    pick = np.sort(rng.choice(len(feasible), plan.topologies, replace=False))
    return [feasible[i] for i in pick]


def prepare_sources(case: GridCase, plan: ExperimentPlan) -> dict[int, SourceRegistry]:
    return train_sources(case, plan.nodes, plan.source_outages, plan.source_samples, plan.source_iters,
                         seed=stream_seed(plan.seed, "sources"), fraction=plan.fraction)


def _train(method, data, case, topo, registry, plan):
    if method == "full_gp":
        return train_full_gp(data, case, topo, plan.iters)
    if method == "vdk":
        return train_vdk(data, case, topo, plan.iters)
    if method == "htl":
        return train_htl(data, case, topo, registry, plan.iters)
    return train_mt(data, case, topo, registry, plan.iters, per_source_weights=plan.per_source_weights)


def _leave_out(registry: SourceRegistry | None, label: str) -> SourceRegistry | None:
    if registry is None or label not in registry.labels:
        return registry
    return SourceRegistry(tuple(m for m in registry if m.label != label))


def _run_topology(case, topo, plan, registries):
    train_seed = stream_seed(plan.seed, "train", topo.label)
    test_seed = stream_seed(plan.seed, "test", topo.label)
    assert train_seed != test_seed
    before = SOLVES.get("train")
    try:
        with solve_category("train"):
            train = generate_dataset(case, topo, sample_injections(
                case, plan.fraction, plan.n_train, train_seed, topo.label), plan.nodes)
        with solve_category("test"):
            test = generate_dataset(case, topo, sample_injections(
                case, plan.fraction, plan.n_test, test_seed, topo.label), plan.nodes)
    except DatasetError as exc:
        log.warning("skipping %s: %s", topo.label, exc)
        return []
    solves = train.solves
    if plan.threads <= 1:
        assert SOLVES.get("train") - before == solves
    rows = []
    for node in plan.nodes:
        tr, te = train.training_set(node), test.training_set(node)
        for method in plan.methods:
            t0 = time.perf_counter()
            model = _train(method, tr, case, topo, _leave_out(registries.get(node), topo.label), plan)
            wall = time.perf_counter() - t0 if plan.timing else None
            rows.append(ResultRow(node, topo.label, method, len(tr), mae(model, te), model.lml, wall, solves))
    return rows


def run(plan: ExperimentPlan, case: GridCase | None = None,
        registries: dict[int, SourceRegistry] | None = None) -> BenchResult:
    """Train and score every (topology, node, method) of the plan.

    Training and test draws come from distinct seed streams per topology;
    all methods see the same training data for a given topology. Source
    topologies are skipped unless ``plan.include_sources``, in which case
    each is scored with its own model left out of the registry.
    """
    case = _resolve_case(plan, case)
    if not plan.nodes:
        return BenchResult(plan, [], [], {})
    start = SOLVES.snapshot()
    if plan.needs_sources and registries is None:
        registries = prepare_sources(case, plan)
    registries = registries or {}
    source_labels = {lab for reg in registries.values() for lab in reg.labels}
    if plan.needs_sources:
        source_labels |= {"base"} | {f"N-1:{b}" for b in plan.source_outages}
    topos = select_topologies(case, plan, exclude=() if plan.include_sources else source_labels)

    pool_mae = {}
    if plan.shared_pool and topos:
        base = base_topology(case)
        with solve_category("shared"):
            pool = generate_dataset(case, base, sample_injections(
                case, plan.fraction, plan.shared_pool, stream_seed(plan.seed, "pool"), "base"), plan.nodes)
        for node, reg in registries.items():
            for m in reg:
                if m.label == "base":
                    pool_mae[node] = mae(m, pool.training_set(node))

    if plan.threads > 1:
        with ThreadPoolExecutor(plan.threads) as ex:
            chunks = list(ex.map(lambda t: _run_topology(case, t, plan, registries), topos))
    else:
        chunks = [_run_topology(case, t, plan, registries) for t in topos]

    order = {t.label: i for i, t in enumerate(topos)}
    morder = {m: i for i, m in enumerate(plan.methods)}
    rows = sorted((r for c in chunks for r in c),
                  key=lambda r: (r.node, order[r.topology_label], morder[r.method]))
    end = SOLVES.snapshot()
    delta = {k: end.get(k, 0) - start.get(k, 0) for k in set(end) | set(start)}
    delta = {k: v for k, v in delta.items() if v}
    kept = [t.label for t, c in zip(topos, chunks) if c]
    return BenchResult(plan, rows, kept, delta, pool_mae)


def run_n1(plan: ExperimentPlan, **kw) -> BenchResult:
    if plan.k != 1:
        raise ValidationError("run_n1 needs a plan with k=1")
    return run(plan, **kw)


def run_n2(plan: ExperimentPlan, **kw) -> BenchResult:
    if plan.k != 2:
        raise ValidationError("run_n2 needs a plan with k=2")
    if any(not np.isscalar(b) for b in plan.source_outages):
        raise ValidationError("N-2 sources may only contain base and single-outage topologies")
    return run(plan, **kw)


# --------------------------------------------------------------------------
# reports


def mae_differences(rows, a: str = "mt_vdk", b: str = "htl") -> list[dict]:
    """Per (node, topology) difference MAE_a - MAE_b."""
    by_key = {(r.node, r.topology_label, r.method): r.mae for r in rows}
    out = []
    for r in rows:
        if r.method != a or (r.node, r.topology_label, b) not in by_key:
            continue
        out.append({"node": r.node, "topology": r.topology_label,
                    "difference": r.mae - by_key[(r.node, r.topology_label, b)]})
    return out


def win_rates(rows, a: str = "mt_vdk", b: str = "htl") -> dict[int, float]:
    """Fraction of topologies per node where method ``a`` has the lower MAE."""
    diffs = mae_differences(rows, a, b)
    out = {}
    for node in sorted({d["node"] for d in diffs}):
        ds = [d["difference"] for d in diffs if d["node"] == node]
        out[node] = sum(x < 0 for x in ds) / len(ds)
    return out


def area_under_density(rows, cutoffs=DEFAULT_AREA_CUTOFFS) -> list[dict]:
    """Empirical CDF of MAE at each cut-off, per method."""
    rows = list(rows)
    if not rows:
        raise ValidationError("no result rows")
    methods = list(dict.fromkeys(r.method for r in rows))
    table = []
    for c in sorted(cutoffs, reverse=True):
        for m in methods:
            vals = np.array([r.mae for r in rows if r.method == m])
            table.append({"cutoff": c, "method": m, "fraction": float(np.mean(vals < c))})
    return table


def solve_budget_report(results, mcs_samples: int = MCS_SAMPLES) -> list[dict]:
    """Power-flow solves spent on training, against brute-force Monte Carlo.

    ``topology_solves`` counts target training solves, ``total_solves`` adds
    the shared base-topology pool. ``ratio`` compares Monte Carlo with the
    per-topology training cost.
    """
    table = []
    for res in results:
        per_topo = {}
        for r in res.rows:
            per_topo.setdefault(r.method, {})[r.topology_label] = r.solves
        pool = res.solves.get("shared", 0)
        n_topo = len(res.topologies)
        mcs = mcs_samples * n_topo
        for method, counts in per_topo.items():
            train = sum(counts.values())
            table.append({
                "contingency": res.contingency,
                "method": method,
                "topologies": n_topo,
                "topology_solves": train,
                "shared_pool": pool,
                "total_solves": train + pool,
                "mcs_solves": mcs,
                "ratio": mcs / train if train else math.inf,
            })
    return table


def pve_coverage(case: GridCase, pairs, registries: dict[int, SourceRegistry], config: PveConfig,
                 n_train: int = 60, iters: int = 50, n_holdout: int = 2000, seed: int = 11,
                 fraction: float = 0.1) -> list[dict]:
    """Fraction of held-out true voltages inside each MT-VDK envelope."""
    from .netcase import topology_from_label

    models, holdout = {}, {}
    for node, label in pairs:
        topo = topology_from_label(case, label)
        with solve_category("train"):
            ds = generate_dataset(case, topo, sample_injections(
                case, fraction, n_train, stream_seed(seed, "train", label), label), [node])
        models[(node, label)] = train_mt(ds.training_set(node), case, topo, registries[node], iters,
                                         solve_count=ds.solves)
        with solve_category("test"):
            holdout[(node, label)] = generate_dataset(case, topo, sample_injections(
                case, fraction, n_holdout, stream_seed(seed, "holdout", label), label), [node]).voltages(node)
    out = []
    for env in build_envelopes(models, config, case, seed, fraction):
        v = holdout[(env.node, env.topology_label)]
        out.append({"node": env.node, "topology": env.topology_label, "beta_lower": env.beta_lower,
                    "beta_upper": env.beta_upper, "coverage": float(np.mean(env.contains(v))),
                    "v_min": float(v.min()), "v_max": float(v.max()),
                    "confidence": env.adjusted_confidence, "train_solves": env.train_solves})
    return out


# --------------------------------------------------------------------------
# output


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _row_record(r: ResultRow) -> dict:
    return {"node": r.node, "topology": r.topology_label, "method": r.method, "n_train": r.n_train,
            "mae_pu": r.mae, "lml": r.lml, "wall_s": r.wall_time, "solves": r.solves}


def emit(data, fmt: str, path) -> None:
    """Write result rows or a report table as CSV or JSON (one record per observation)."""
    path = Path(path)
    records = [_row_record(r) if isinstance(r, ResultRow) else dict(r) for r in data]
    if data and isinstance(data[0], ResultRow) or not records:
        header = RESULT_HEADER if not records or "mae_pu" in records[0] else list(records[0])
    else:
        header = list(records[0])
    try:
        if fmt == "csv":
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(header)
                for rec in records:
                    w.writerow([_fmt(rec.get(h)) for h in header])
        elif fmt == "json":
            path.write_text(json.dumps(records, indent=1) + "\n")
        else:
            raise ValidationError(f"unknown format {fmt!r}")
    except OSError as exc:
        raise ValidationError(f"cannot write {path}: {exc}") from None


def read_rows(path) -> list[ResultRow]:
    path = Path(path)
    try:
        if path.suffix == ".json":
            records = json.loads(path.read_text())
        else:
            with open(path, newline="") as fh:
                records = list(csv.DictReader(fh))
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from None
    rows = []
    for rec in records:
        wall = rec.get("wall_s")
        rows.append(ResultRow(int(rec["node"]), rec["topology"], rec["method"], int(rec["n_train"]),
                              float(rec["mae_pu"]), float(rec["lml"]),
                              None if wall in (None, "") else float(wall), int(rec["solves"])))
    return rows
