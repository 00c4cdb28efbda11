"""``gridkernel`` command-line front end."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench
from .acpf import (
    SOLVES,
    base_injection,
    generate_dataset,
    interleave,
    sample_injections,
    solve_category,
    solve_nr,
    stream_seed,
)
from .errors import DatasetError, GridKernelError, ValidationError
from .gpr import TrainingSet, load_model, predict, save_model
from .netcase import apply_outage, base_topology, build_ybus, load_case, topology_from_label
from .pve import PveConfig, build_envelopes, write_envelopes
from .transfer import load_registry, train_full_gp, train_htl, train_mt, train_vdk

log = logging.getLogger("gridkernel")


def _ids(text: str | None) -> tuple[int, ...]:
    if not text:
        return ()
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise ValidationError(f"expected comma-separated integers, got {text!r}") from None


def _topology(case, outage: str | None):
    return apply_outage(base_topology(case), _ids(outage))


def _open_out(path):
    if path in (None, "-"):
        return _Stdout()
    try:
        return open(path, "w", newline="")
    except OSError as exc:
        raise ValidationError(f"cannot write {path}: {exc}") from None


class _Stdout:
    def __enter__(self):
        return sys.stdout

    def __exit__(self, *exc):
        return False


def _read_csv(path) -> tuple[list[str], np.ndarray]:
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            body = [row for row in reader if row]
    except (OSError, StopIteration) as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from None
    try:
        return header, np.array(body, dtype=float).reshape(len(body), len(header))
    except ValueError as exc:
        raise ValidationError(f"{path}: non-numeric or ragged data ({exc})") from None


def _injection_header(case) -> list[str]:
    return [f"s_{b}{pq}" for b in case.bus_ids for pq in ("p", "q")]


def _write_samples(path, case, inj, extra_header=(), extra=None):
    with _open_out(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_idx", *_injection_header(case), *extra_header])
        for k, s in enumerate(inj):
            tail = [] if extra is None else [repr(float(v)) for v in extra[k]]
            w.writerow([k, *(repr(float(v)) for v in s), *tail])


def _read_injections(path, case) -> tuple[list[str], np.ndarray]:
    header, data = _read_csv(path)
    cols = _injection_header(case)
    if header[1:1 + len(cols)] != cols:
        raise ValidationError(f"{path}: injection columns do not match case buses")
    return header, data


def _emit_table(args, table):
    if args.out in (None, "-"):
        buf = io.StringIO()
        if args.format == "json":
            buf.write(json.dumps(table, indent=1) + "\n")
        elif table:
            w = csv.DictWriter(buf, fieldnames=list(table[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(table)
        sys.stdout.write(buf.getvalue())
    else:
        bench.emit(table, args.format, args.out)


# --------------------------------------------------------------------------
# handlers


def cmd_case_info(args):
    case = load_case(args.case)
    print(f"name: {case.name}")
    print(f"buses: {case.n_bus}")
    print(f"branches: {len(case.branches)}")
    print(f"slack: {case.bus_ids[case.slack]}")
    print(f"fingerprint: {case.fingerprint}")


def cmd_case_ybus(args):
    case = load_case(args.case)
    Y = build_ybus(case, _topology(case, args.outage))
    with _open_out(args.out) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "j", "g", "b"])
        for i, j in zip(*np.nonzero(Y)):
            w.writerow([int(case.bus_ids[i]), int(case.bus_ids[j]), repr(float(Y[i, j].real)), repr(float(Y[i, j].imag))])


def cmd_pf_solve(args):
    case = load_case(args.case)
    topo = _topology(case, args.outage)
    inj = base_injection(case)
    if args.loads:
        header, data = _read_csv(args.loads)
        if header[:3] != ["bus", "p_pu", "q_pu"]:
            raise ValidationError(f"{args.loads}: expected header bus,p_pu,q_pu")
        pd, qd = case.p_load.copy(), case.q_load.copy()
        for bus, p, q in data[:, :3]:
            if int(bus) not in case.index:
                raise ValidationError(f"{args.loads}: unknown bus {int(bus)}")
            pd[case.index[int(bus)]], qd[case.index[int(bus)]] = p, q
        inj = interleave(case.p_gen - pd, -qd)
    sol = solve_nr(case, topo, inj)
    if not sol.converged:
        raise DatasetError(f"power flow did not converge on {topo.label}: {sol.reason}")
    with _open_out(args.out) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bus", "v_mag", "v_ang_deg"])
        for b, vm, va in zip(case.bus_ids, sol.v_mag, np.degrees(sol.v_ang)):
            w.writerow([b, repr(float(vm)), repr(float(va))])
    log.info("converged in %d iterations, mismatch %.2e", sol.iterations, sol.max_mismatch)


def cmd_sample_gen(args):
    case = load_case(args.case)
    samples = sample_injections(case, args.frac, args.n, stream_seed(args.seed, "samples"))
    _write_samples(args.out, case, samples.injections)


def cmd_dataset_gen(args):
    case = load_case(args.case)
    topo = _topology(case, args.outage)
    nodes = _ids(args.nodes)
    _, data = _read_injections(args.samples, case)
    ds = generate_dataset(case, topo, data[:, 1:1 + 2 * case.n_bus], nodes)
    volts = np.column_stack([ds.voltages(n) for n in nodes]) if nodes else None
    _write_samples(args.out, case, ds.inputs, [f"V_{n}" for n in nodes], volts)
    log.info("%s: %d solves, %d rejected", topo.label, ds.solves, ds.rejected)


def cmd_train(args):
    case = load_case(args.case)
    topo = _topology(case, args.outage)
    samples = sample_injections(case, args.frac, args.n, stream_seed(args.seed, "train", topo.label),
                                topo.label)
    with solve_category("train"):
        ds = generate_dataset(case, topo, samples, [args.node])
    data = ds.training_set(args.node)
    kw = dict(solve_count=ds.solves)
    if args.method == "vdk":
        model = train_vdk(data, case, topo, args.iters, **kw)
    elif args.method == "full":
        model = train_full_gp(data, case, topo, args.iters, **kw)
    else:
        if not args.sources:
            raise ValidationError(f"train {args.method} needs --sources")
        registry = load_registry(args.sources, node=args.node)
        if args.method == "htl":
            model = train_htl(data, case, topo, registry, args.iters, **kw)
        else:
            model = train_mt(data, case, topo, registry, args.iters,
                             per_source_weights=args.per_source_weights, **kw)
    if args.out in (None, "-"):
        print(json.dumps(model.to_dict()))
    else:
        save_model(model, args.out)
    log.info("%s node %d: lml %.3f after %d solves", topo.label, args.node, model.lml, ds.solves)


def cmd_eval(args):
    model = load_model(args.model)
    header, truth = _read_csv(args.truth)
    col = f"V_{model.target_node}"
    if col not in header:
        raise ValidationError(f"{args.truth} has no column {col}")
    y = truth[:, header.index(col)]
    if args.samples:
        case_cols = len(model.inputs[0])
        _, samp = _read_csv(args.samples)
        X = samp[:, 1:1 + case_cols]
        if len(X) != len(y):
            raise ValidationError(f"{len(X)} samples but {len(y)} truth rows")
    else:
        X = truth[:, 1:1 + len(model.inputs[0])]
    mean, var = predict(model, X)
    test = TrainingSet(X, y, model.target_node)
    table = [{"node": model.target_node, "topology": model.label, "n_test": len(test),
              "mae_pu": float(np.mean(np.abs(mean - y))),
              "max_abs_pu": float(np.max(np.abs(mean - y))),
              "mean_sd_pu": float(np.mean(np.sqrt(var)))}]
    if args.report == "predictions":
        table = [{"sample_idx": k, "v_true": float(t), "v_mean": float(m), "v_sd": float(np.sqrt(v))}
                 for k, (t, m, v) in enumerate(zip(y, mean, var))]
    _emit_table(args, table)


def cmd_pve_build(args):
    case = load_case(args.case)
    d = Path(args.models)
    if not d.is_dir():
        raise ValidationError(f"model directory not found: {d}")
    models = {}
    for p in sorted(d.glob("*.json")):
        m = load_model(p)
        if m.case_id and m.case_id != case.fingerprint:
            raise ValidationError(f"{p} was trained on a different case")
        topology_from_label(case, m.label)
        models[(m.target_node, m.label)] = m
    if not models:
        raise ValidationError(f"no model files in {d}")
    config = PveConfig(args.eps, args.delta, args.kappa, args.T)
    envs = build_envelopes(models, config, case, args.seed, args.frac)
    write_envelopes(envs, args.out if args.out not in (None, "-") else "/dev/stdout")


def _plan(args, k):
    preset = args.preset or ("n1-desk" if k == 1 else "n2-desk")
    return bench.ExperimentPlan(
        case=args.case, methods=tuple(args.methods.split(",")),
        sources=args.sources if not args.sources[0].isdigit() else _ids(args.sources),
        k=k, nodes=_ids(args.nodes), n_train=args.n, iters=args.iters, n_test=args.n_test,
        seed=args.seed, topologies=None if args.full else args.topologies, fraction=args.frac,
        source_samples=args.source_samples, source_iters=args.source_iters,
        per_source_weights=args.per_source_weights, include_sources=args.include_sources,
        timing=args.timing, threads=args.threads, preset=preset)


def cmd_bench(args):
    k = 1 if args.order == "n1" else 2
    plan = _plan(args, k)
    res = bench.run_n1(plan) if k == 1 else bench.run_n2(plan)
    bench.emit(res.rows, args.format, "/dev/stdout" if args.out in (None, "-") else args.out)
    if args.diff_out:
        bench.emit(bench.mae_differences(res.rows), args.format, args.diff_out)
    if "mt_vdk" in plan.methods and "htl" in plan.methods:
        for node, rate in bench.win_rates(res.rows).items():
            print(f"node {node}: MT-VDK beats HTL on {rate:.1%} of topologies", file=sys.stderr)
    print(f"solves: {json.dumps(res.solves, sort_keys=True)}", file=sys.stderr)


def cmd_report_area(args):
    rows = bench.read_rows(args.results)
    cutoffs = [float(c) for c in args.cutoffs.split(",")] if args.cutoffs else bench.DEFAULT_AREA_CUTOFFS
    _emit_table(args, bench.area_under_density(rows, cutoffs))


def cmd_report_budget(args):
    results = []
    for path, k in zip(args.results, args.order or ["n1"] * len(args.results)):
        rows = bench.read_rows(path)
        labels = list(dict.fromkeys(r.topology_label for r in rows))
        plan = bench.ExperimentPlan(k=1 if k == "n1" else 2, methods=tuple(dict.fromkeys(r.method for r in rows)))
        results.append(bench.BenchResult(plan, rows, labels, {"shared": args.shared_pool}))
    _emit_table(args, bench.solve_budget_report(results, args.mcs_samples))


# --------------------------------------------------------------------------
# parser


def _global_flags(defaults: bool) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    kw = (lambda v: {"default": v}) if defaults else (lambda v: {"default": argparse.SUPPRESS})
    p.add_argument("--seed", type=int, **kw(7), help="master seed")
    p.add_argument("--threads", type=int, **kw(1), help="worker threads for bench runs")
    p.add_argument("--out", **kw(None), help="output path (default: stdout)")
    p.add_argument("--format", choices=("csv", "json"), **kw("csv"))
    p.add_argument("-v", "--verbose", action="count", **kw(0))
    return p


def build_parser() -> argparse.ArgumentParser:
    root = argparse.ArgumentParser(prog="gridkernel", parents=[_global_flags(True)],
                                   description="Vertex-degree-kernel GP voltage models for power grids")
    common = _global_flags(False)
    sub = root.add_subparsers(dest="command", required=True)

    def leaf(parent, name, func, help=None):
        p = parent.add_parser(name, parents=[common], help=help)
        p.set_defaults(func=func)
        return p

    case = sub.add_parser("case", help="inspect a case file").add_subparsers(dest="action", required=True)
    p = leaf(case, "info", cmd_case_info)
    p.add_argument("case")
    p = leaf(case, "ybus", cmd_case_ybus)
    p.add_argument("case")
    p.add_argument("--outage")

    pf = sub.add_parser("pf", help="power flow").add_subparsers(dest="action", required=True)
    p = leaf(pf, "solve", cmd_pf_solve)
    p.add_argument("case")
    p.add_argument("--outage")
    p.add_argument("--loads", help="CSV bus,p_pu,q_pu overriding demand")

    sample = sub.add_parser("sample", help="load samples").add_subparsers(dest="action", required=True)
    p = leaf(sample, "gen", cmd_sample_gen)
    p.add_argument("case")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--frac", type=float, default=0.1)

    dataset = sub.add_parser("dataset", help="solved datasets").add_subparsers(dest="action", required=True)
    p = leaf(dataset, "gen", cmd_dataset_gen)
    p.add_argument("case")
    p.add_argument("--outage")
    p.add_argument("--samples", required=True)
    p.add_argument("--nodes", default="")

    train = sub.add_parser("train", help="train a GP voltage model").add_subparsers(dest="method", required=True)
    for method in ("vdk", "htl", "mt", "full"):
        p = leaf(train, method, cmd_train)
        p.add_argument("case")
        p.add_argument("--outage")
        p.add_argument("--node", type=int, required=True)
        p.add_argument("--n", type=int, default=60)
        p.add_argument("--iters", type=int, default=50)
        p.add_argument("--frac", type=float, default=0.1)
        p.add_argument("--sources", help="directory of source model files")
        p.add_argument("--per-source-weights", action="store_true")

    p = leaf(sub, "eval", cmd_eval, help="score a model against solved data")
    p.add_argument("model")
    p.add_argument("--samples")
    p.add_argument("--truth", required=True)
    p.add_argument("--report", choices=("mae", "predictions"), default="mae")

    pve = sub.add_parser("pve", help="voltage envelopes").add_subparsers(dest="action", required=True)
    p = leaf(pve, "build", cmd_pve_build)
    p.add_argument("--models", required=True)
    p.add_argument("--case", default="case30")
    p.add_argument("--eps", type=float, default=0.02)
    p.add_argument("--delta", type=float, default=1e-4)
    p.add_argument("--kappa", type=float, default=3.75)
    p.add_argument("--T", type=int, default=None)
    p.add_argument("--frac", type=float, default=0.1)

    bn = sub.add_parser("bench", help="contingency benchmarks").add_subparsers(dest="order", required=True)
    for order, nodes, sources in (("n1", "4", "A"), ("n2", "6,25", "N2")):
        p = leaf(bn, order, cmd_bench)
        p.add_argument("--case", default="case30")
        p.add_argument("--nodes", default=nodes)
        p.add_argument("--methods", default="vdk,htl,mt_vdk")
        p.add_argument("--sources", default=sources, help="source set label or branch list")
        p.add_argument("--n", type=int, default=60)
        p.add_argument("--iters", type=int, default=50)
        p.add_argument("--n-test", type=int, default=500)
        p.add_argument("--topologies", type=int, default=10 if order == "n1" else 30)
        p.add_argument("--full", action="store_true", help="every feasible topology")
        p.add_argument("--frac", type=float, default=0.1)
        p.add_argument("--source-samples", type=int, default=512)
        p.add_argument("--source-iters", type=int, default=50)
        p.add_argument("--per-source-weights", action="store_true")
        p.add_argument("--include-sources", action="store_true",
                       help="also score source topologies, leaving each out of its own registry")
        p.add_argument("--timing", action="store_true", help="record wall time per fit")
        p.add_argument("--preset", default="")
        p.add_argument("--diff-out", help="write MAE_MT - MAE_HTL per topology")

    rep = sub.add_parser("report", help="summaries of bench results").add_subparsers(dest="kind", required=True)
    p = leaf(rep, "area", cmd_report_area)
    p.add_argument("results")
    p.add_argument("--cutoffs")
    p = leaf(rep, "budget", cmd_report_budget)
    p.add_argument("results", nargs="+")
    p.add_argument("--order", nargs="+", choices=("n1", "n2"))
    p.add_argument("--shared-pool", type=int, default=100)
    p.add_argument("--mcs-samples", type=int, default=bench.MCS_SAMPLES)
    return root


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except GridKernelError as exc:
        print(f"gridkernel: error: {exc}", file=sys.stderr)
        return exc.exit_code
    finally:
        log.debug("power-flow solves: %s", SOLVES.snapshot())
    return 0


if __name__ == "__main__":
    sys.exit(main())
