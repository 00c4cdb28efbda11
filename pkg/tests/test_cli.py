import csv
import json

import numpy as np
import pytest

from gridkernel.cli import main

from conftest import two_bus_text


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_case_info(capsys):
    code, out, _ = run(capsys, "case", "info", "case30")
    assert code == 0
    assert "buses: 30" in out and "branches: 41" in out and "slack: 1" in out


def test_ybus_triplets(capsys, tmp_path, case30, base30):
    from gridkernel.netcase import apply_outage, build_ybus

    out = tmp_path / "y.csv"
    assert run(capsys, "case", "ybus", "case30", "--outage", "12,15", "--out", out)[0] == 0
    rows = list(csv.DictReader(out.open()))
    Y = build_ybus(case30, apply_outage(base30, [12, 15]))
    assert len(rows) == np.count_nonzero(Y)
    r = rows[0]
    i, j = case30.index[int(r["i"])], case30.index[int(r["j"])]
    assert complex(float(r["g"]), float(r["b"])) == Y[i, j]


def test_exit_codes(capsys, tmp_path):
    assert run(capsys, "case", "info", tmp_path / "missing.m")[0] == 2
    assert run(capsys, "pf", "solve", "case30", "--outage", "13")[0] == 2
    heavy = tmp_path / "heavy.json"
    heavy.write_text(two_bus_text(p_mw=900, q_mvar=0))
    code, _, err = run(capsys, "pf", "solve", heavy)
    assert code == 3 and "did not converge" in err
    with pytest.raises(SystemExit):
        main(["bogus"])


def test_pf_solve_with_loads(capsys, tmp_path):
    two = tmp_path / "two.json"
    two.write_text(two_bus_text())
    loads = tmp_path / "loads.csv"
    loads.write_text("bus,p_pu,q_pu\n2,0.0,0.0\n")
    code, out, _ = run(capsys, "pf", "solve", two, "--loads", loads)
    assert code == 0
    rows = list(csv.DictReader(out.splitlines()))
    assert float(rows[1]["v_mag"]) == pytest.approx(1.0, abs=1e-10)


def test_pipeline(capsys, tmp_path):
    s, d, m = tmp_path / "s.csv", tmp_path / "d.csv", tmp_path / "models"
    m.mkdir()
    assert run(capsys, "sample", "gen", "case30", "--n", 30, "--seed", 3, "--out", s)[0] == 0
    assert run(capsys, "dataset", "gen", "case30", "--outage", 12, "--samples", s,
               "--nodes", "4,6", "--out", d)[0] == 0
    header = next(csv.reader(d.open()))
    assert header[0] == "sample_idx" and header[1:3] == ["s_1p", "s_1q"] and header[-2:] == ["V_4", "V_6"]
    assert run(capsys, "train", "vdk", "case30", "--outage", 12, "--node", 4, "--n", 20, "--iters", 5,
               "--out", m / "vdk.json")[0] == 0
    code, out, _ = run(capsys, "eval", m / "vdk.json", "--truth", d, "--format", "json")
    report = json.loads(out)
    assert code == 0 and report[0]["n_test"] == 30 and report[0]["mae_pu"] < 5e-3
    code, out, _ = run(capsys, "eval", m / "vdk.json", "--samples", s, "--truth", d, "--report", "predictions")
    assert code == 0 and len(out.splitlines()) == 31
    pve = tmp_path / "pve.csv"
    assert run(capsys, "pve", "build", "--models", m, "--T", 100, "--out", pve)[0] == 0
    rows = list(csv.DictReader(pve.open()))
    assert rows[0]["topology"] == "N-1:12" and rows[0]["train_solves"] == "20"


def test_transfer_training_needs_sources(capsys, tmp_path, small_registry):
    from gridkernel.transfer import save_registry

    assert run(capsys, "train", "mt", "case30", "--outage", 12, "--node", 4, "--n", 10)[0] == 2
    save_registry(small_registry, tmp_path / "src")
    out = tmp_path / "mt.json"
    assert run(capsys, "train", "mt", "case30", "--outage", 12, "--node", 4, "--n", 15, "--iters", 2,
               "--sources", tmp_path / "src", "--out", out)[0] == 0
    assert len(json.loads(out.read_text())["theta_log"]) == 62


def test_bench_and_reports(capsys, tmp_path):
    r1, r2 = tmp_path / "a.csv", tmp_path / "b.csv"
    args = ["bench", "n1", "--topologies", 2, "--n", 12, "--iters", 2, "--n-test", 10,
            "--source-samples", 20, "--source-iters", 2, "--seed", 5]
    code, _, err = run(capsys, *args, "--out", r1, "--diff-out", tmp_path / "diff.csv")
    assert code == 0 and "MT-VDK beats HTL" in err
    run(capsys, *args, "--out", r2)
    assert r1.read_bytes() == r2.read_bytes()
    assert len((tmp_path / "diff.csv").read_text().splitlines()) == 3
    code, out, _ = run(capsys, "report", "area", r1, "--cutoffs", "1e-3,1e-4")
    assert code == 0 and out.splitlines()[0] == "cutoff,method,fraction"
    code, out, _ = run(capsys, "report", "budget", r1, "--format", "json")
    table = json.loads(out)
    assert {e["method"] for e in table} == {"vdk", "htl", "mt_vdk"}
    assert all(e["total_solves"] == 2 * 12 + 100 and e["mcs_solves"] == 2000 for e in table)
