import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridkernel import bench
from gridkernel.acpf import SOLVES
from gridkernel.bench import BenchResult, ExperimentPlan, ResultRow
from gridkernel.errors import ValidationError

from conftest import two_bus_text


def rows_from(maes, method="vdk"):
    return [ResultRow(4, f"N-1:{k}", method, 60, m, 0.0, None, 60) for k, m in enumerate(maes)]


def test_area_counting_oracle():
    rows = rows_from([2e-4, 4e-4, 6e-4, 8e-4])
    (entry,) = bench.area_under_density(rows, [5e-4])
    assert entry == {"cutoff": 5e-4, "method": "vdk", "fraction": 0.5}
    assert all(e["fraction"] == 1.0 for e in bench.area_under_density(rows_from([1e-5, 2e-5])))
    with pytest.raises(ValidationError):
        bench.area_under_density([])


@settings(max_examples=40)
@given(st.lists(st.floats(0, 2e-3), min_size=1, max_size=30),
       st.lists(st.floats(0, 2e-3), min_size=2, max_size=6, unique=True))
def test_area_is_cdf(maes, cutoffs):
    table = bench.area_under_density(rows_from(maes), cutoffs)
    fr = [e["fraction"] for e in sorted(table, key=lambda e: e["cutoff"])]
    assert all(0 <= f <= 1 for f in fr)
    assert fr == sorted(fr)


def test_result_row_rejects_negative_mae():
    with pytest.raises(ValidationError):
        ResultRow(4, "base", "vdk", 60, -1e-6, 0.0, None, 60)


def test_plan_validation(case30):
    with pytest.raises(ValidationError):
        ExperimentPlan(methods=("svm",))
    with pytest.raises(ValidationError):
        ExperimentPlan(k=3)
    with pytest.raises(ValidationError):
        bench.run(ExperimentPlan(sources=(1, 99)), case=case30)
    with pytest.raises(ValidationError):
        bench.run_n2(ExperimentPlan(k=1))
    assert ExperimentPlan(sources="C").source_outages == (12, 15, 18, 22, 35)


def test_empty_node_list_gives_empty_result(case30):
    res = bench.run_n1(ExperimentPlan(nodes=()), case=case30)
    assert res.rows == [] and res.topologies == []


def test_two_bus_n2_is_empty(tmp_path):
    path = tmp_path / "two.json"
    path.write_text(two_bus_text())
    res = bench.run_n2(ExperimentPlan(case=str(path), k=2, nodes=(2,), methods=("vdk",), sources=()))
    assert res.rows == []


def test_budget_reference_accounting():
    labels = [f"N-1:{k}" for k in range(38)]
    rows = [ResultRow(4, l, "mt_vdk", 60, 1e-5, 0.0, None, 60) for l in labels]
    res = BenchResult(ExperimentPlan(), rows, labels, {"shared": 100})
    (entry,) = bench.solve_budget_report([res])
    assert entry["total_solves"] == 2380 and entry["mcs_solves"] == 38000
    assert entry["ratio"] == pytest.approx(38000 / 2280)
    assert bench.solve_budget_report([]) == []


def test_differences_and_win_rates():
    rows = rows_from([3e-4, 1e-4], "htl") + rows_from([2e-4, 2e-4], "mt_vdk")
    diffs = bench.mae_differences(rows)
    assert [round(d["difference"], 10) for d in diffs] == [-1e-4, 1e-4]
    assert bench.win_rates(rows) == {4: 0.5}


@pytest.fixture(scope="module")
def small_run(case30, small_registry):
    plan = ExperimentPlan(nodes=(4,), n_train=15, n_test=20, iters=3, topologies=3, shared_pool=10,
                          sources=(1, 10), seed=3)
    before = SOLVES.snapshot()
    res = bench.run_n1(plan, case=case30, registries={4: small_registry})
    return plan, res, before, SOLVES.snapshot()


def test_small_run_structure(small_run):
    plan, res, _, _ = small_run
    assert len(res.rows) == 3 * 3
    assert {r.method for r in res.rows} == {"vdk", "htl", "mt_vdk"}
    assert not set(res.topologies) & {"N-1:1", "N-1:10"}
    assert all(r.wall_time is None and r.mae >= 0 and r.n_train == 15 for r in res.rows)
    assert 4 in res.pool_mae


def test_small_run_solves_reconcile(small_run):
    _, res, before, after = small_run
    per_topo = {r.topology_label: r.solves for r in res.rows}
    assert sum(per_topo.values()) == res.solves["train"] == after["train"] - before.get("train", 0)
    assert res.solves["shared"] == 10
    assert res.solves["test"] == 3 * 20


def test_rerun_is_byte_identical(tmp_path, case30, small_registry, small_run):
    plan, res, _, _ = small_run
    again = bench.run_n1(plan, case=case30, registries={4: small_registry})
    threaded = bench.run_n1(ExperimentPlan(**{**plan.__dict__, "threads": 3}), case=case30,
                            registries={4: small_registry})
    paths = [tmp_path / f"{k}.csv" for k in range(3)]
    for p, r in zip(paths, (res, again, threaded)):
        bench.emit(r.rows, "csv", p)
    assert paths[0].read_bytes() == paths[1].read_bytes() == paths[2].read_bytes()


def test_train_and_test_streams_disjoint(case30, small_run):
    plan, res, _, _ = small_run
    from gridkernel.acpf import sample_injections, stream_seed

    for label in res.topologies:
        tr = sample_injections(case30, 0.1, plan.n_train, stream_seed(plan.seed, "train", label)).injections
        te = sample_injections(case30, 0.1, plan.n_test, stream_seed(plan.seed, "test", label)).injections
        assert not (tr[:, None, :] == te[None, :, :]).all(axis=2).any()


def test_emit_round_trip(tmp_path, small_run):
    _, res, _, _ = small_run
    for fmt in ("csv", "json"):
        path = tmp_path / f"rows.{fmt}"
        bench.emit(res.rows, fmt, path)
        assert bench.read_rows(path) == res.rows
    bench.emit([], "csv", tmp_path / "empty.csv")
    assert (tmp_path / "empty.csv").read_text() == ",".join(bench.RESULT_HEADER) + "\n"
    with pytest.raises(ValidationError, match="nope"):
        bench.emit(res.rows, "csv", tmp_path / "nope" / "x.csv")
    with pytest.raises(ValidationError):
        bench.emit(res.rows, "xml", tmp_path / "x.xml")


def test_timing_fills_wall_time(case30, small_registry):
    plan = ExperimentPlan(nodes=(4,), methods=("vdk",), n_train=10, n_test=5, iters=1, topologies=1,
                          shared_pool=0, sources=(1, 10), timing=True)
    (row,) = bench.run_n1(plan, case=case30, registries={4: small_registry}).rows
    assert row.wall_time > 0


def test_include_sources_leaves_each_out(case30, small_registry):
    plan = ExperimentPlan(nodes=(4,), methods=("mt_vdk",), n_train=10, n_test=5, iters=1, topologies=None,
                          shared_pool=0, sources=(1, 10), include_sources=True)
    res = bench.run_n1(plan, case=case30, registries={4: small_registry})
    assert len(res.topologies) == 38
    assert {"N-1:1", "N-1:10"} <= set(res.topologies)
    assert np.isfinite([r.mae for r in res.rows]).all()
