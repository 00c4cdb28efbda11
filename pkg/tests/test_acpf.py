import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import bisect, root

from gridkernel.acpf import (
    SOLVES,
    base_injection,
    enumerate_feasible,
    generate_dataset,
    interleave,
    power_mismatch,
    sample_injections,
    solve_category,
    solve_nr,
    split,
    stream_seed,
)
from gridkernel.errors import DatasetError, TopologyError, ValidationError
from gridkernel.netcase import apply_outage, base_topology, build_ybus


def two_bus_voltage(p, q, x=0.1):
    """High-voltage root of (V^2/x + q)^2 + p^2 = V^2/x^2 for a lossless line."""
    b = 1 / x
    f = lambda v: (b * v * v + q) ** 2 + p * p - (b * v) ** 2
    v_nose = np.sqrt((b / 2 - q) / b)
    return bisect(f, v_nose, 2.0, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=400)


def scipy_pf(case, topo, inj):
    """Polar mismatch equations solved by scipy's hybrid root finder."""
    Y = build_ybus(case, topo)
    p, q = split(inj)
    pv, pq = case.pv, case.pq
    pvpq = np.r_[pv, pq]
    vm0 = np.array([b.v_setpoint if b.type != "pq" else 1.0 for b in case.buses])

    def unpack(x):
        va = np.zeros(case.n_bus)
        vm = vm0.copy()
        va[pvpq] = x[:len(pvpq)]
        vm[pq] = x[len(pvpq):]
        return vm * np.exp(1j * va)

    def F(x):
        V = unpack(x)
        mis = V * np.conj(Y @ V) - (p + 1j * q)
        return np.r_[mis[pvpq].real, mis[pq].imag]

    sol = root(F, np.r_[np.zeros(len(pvpq)), np.ones(len(pq))], method="hybr", options={"xtol": 1e-13})
    assert np.max(np.abs(F(sol.x))) < 1e-11
    return unpack(sol.x)


def test_case30_base_converges(case30, base30):
    sol = solve_nr(case30, base30, base_injection(case30))
    assert sol.converged and sol.iterations <= 10
    assert sol.max_mismatch < 1e-8
    mis = power_mismatch(case30, base30, base_injection(case30), sol)
    assert np.max(np.abs(mis[np.r_[case30.pv, case30.pq]].real)) < 1e-8
    assert np.max(np.abs(mis[case30.pq].imag)) < 1e-8


def test_case30_matches_scipy_root(case30, base30):
    inj = sample_injections(case30, 0.1, 1, 3).injections[0]
    sol = solve_nr(case30, base30, inj)
    V = scipy_pf(case30, base30, inj)
    np.testing.assert_allclose(sol.voltage, V, atol=1e-9)


def test_case30_published_voltages(case30, base30):
    sol = solve_nr(case30, base30, base_injection(case30))
    vm = dict(zip(case30.bus_ids.tolist(), sol.v_mag))
    # reference power-flow solution of the IEEE 30-bus case
    assert vm[1] == pytest.approx(1.06)
    assert vm[3] == pytest.approx(1.021, abs=6e-4)
    assert vm[4] == pytest.approx(1.012, abs=6e-4)
    assert vm[30] == pytest.approx(0.992, abs=2e-3)


def test_flat_and_case_start_agree(case30, base30):
    inj = base_injection(case30)
    a = solve_nr(case30, base30, inj, start="flat")
    b = solve_nr(case30, base30, inj, start="case")
    np.testing.assert_allclose(a.v_mag, b.v_mag, atol=1e-8)


@pytest.mark.parametrize("p_mw, q_mvar", [(50, 20), (150, 60), (10, -30), (0, 0), (300, 0)])
def test_two_bus_matches_bisection(two_bus, p_mw, q_mvar):
    case = two_bus(p_mw=p_mw, q_mvar=q_mvar)
    sol = solve_nr(case, base_topology(case), base_injection(case), tol=1e-13)
    assert sol.converged
    assert sol.v_mag[1] == pytest.approx(two_bus_voltage(p_mw / 100, q_mvar / 100), abs=1e-10)


def test_two_bus_beyond_nose_fails(two_bus):
    case = two_bus(p_mw=800, q_mvar=0)
    sol = solve_nr(case, base_topology(case), base_injection(case))
    assert not sol.converged and sol.reason


def test_disconnected_topology_raises(case30, base30):
    with pytest.raises(TopologyError):
        solve_nr(case30, apply_outage(base30, [13]), base_injection(case30))


def test_bad_injection_shape(case30, base30):
    with pytest.raises(ValidationError):
        solve_nr(case30, base30, np.zeros(7))
    with pytest.raises(ValidationError):
        solve_nr(case30, base30, np.full(60, np.nan))


def test_solve_runtime(case30, base30):
    inj = base_injection(case30)
    solve_nr(case30, base30, inj)
    t0 = time.perf_counter()
    for _ in range(20):
        solve_nr(case30, base30, inj)
    assert (time.perf_counter() - t0) / 20 < 0.1


def test_interleave_split_inverse():
    p, q = np.arange(4.0), -np.arange(4.0)
    s = interleave(p, q)
    np.testing.assert_array_equal(s, [0, 0, 1, -1, 2, -2, 3, -3])
    np.testing.assert_array_equal(split(s)[0], p)
    np.testing.assert_array_equal(split(s)[1], q)


def test_sampling_perturbs_loads_only(case30):
    f = 0.1
    S = sample_injections(case30, f, 500, 9).injections
    p, q = split(S)
    pd = case30.p_gen - p
    qd = -q
    lo, hi = 1 - f, 1 + f
    for load, drawn in ((case30.p_load, pd), (case30.q_load, qd)):
        nz = load != 0
        ratio = drawn[:, nz] / load[nz]
        assert ratio.min() >= lo - 1e-12 and ratio.max() <= hi + 1e-12
        np.testing.assert_allclose(drawn[:, ~nz], 0, atol=1e-15)
    # every coordinate draws independently
    assert np.corrcoef(pd[:, 1], pd[:, 2])[0, 1] == pytest.approx(0, abs=0.15)


def test_sampling_zero_fraction_is_base(case30):
    S = sample_injections(case30, 0.0, 3, 1).injections
    np.testing.assert_allclose(S, np.tile(base_injection(case30), (3, 1)))


def test_sampling_reproducible_and_validated(case30):
    a = sample_injections(case30, 0.1, 5, 42).injections
    b = sample_injections(case30, 0.1, 5, 42).injections
    assert np.array_equal(a, b)
    assert not np.array_equal(a, sample_injections(case30, 0.1, 5, 43).injections)
    with pytest.raises(ValidationError):
        sample_injections(case30, 1.2, 5, 1)
    with pytest.raises(ValidationError):
        sample_injections(case30, 0.1, 0, 1)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32), st.text(max_size=8), st.text(max_size=8))
def test_stream_seed_keys_separate(seed, a, b):
    assert stream_seed(seed, a, b) == stream_seed(seed, a, b)
    if a != b:
        assert stream_seed(seed, "train", a) != stream_seed(seed, "train", b)
    assert 0 <= stream_seed(seed, a) < 2**64


def test_solve_counter_categories(case30, base30):
    before = SOLVES.snapshot()
    with solve_category("unit"):
        ds = generate_dataset(case30, base30, sample_injections(case30, 0.1, 7, 1), [4])
    after = SOLVES.snapshot()
    assert after.get("unit", 0) - before.get("unit", 0) == 7 == ds.solves
    assert SOLVES.total == sum(after.values())


def test_dataset_columns(case30, base30):
    samples = sample_injections(case30, 0.1, 4, 2)
    ds = generate_dataset(case30, base30, samples, [4, 6])
    assert ds.inputs.shape == (4, 60) and ds.rejected == 0
    for k in range(4):
        sol = solve_nr(case30, base30, samples.injections[k])
        assert ds.voltages(4)[k] == sol.v_mag[case30.index[4]]
    ts = ds.training_set(6)
    assert ts.target_node == 6 and len(ts) == 4


def test_dataset_rejection_threshold(two_bus):
    case = two_bus(p_mw=380, q_mvar=0)
    topo = base_topology(case)
    samples = sample_injections(case, 0.5, 40, 3)
    with pytest.raises(DatasetError):
        generate_dataset(case, topo, samples, [2])
    ds = generate_dataset(case, topo, samples, [2], max_reject_rate=1.0)
    assert ds.rejected > 0 and len(ds) + ds.rejected == 40


def test_n1_feasible_count(case30):
    feasible = enumerate_feasible(case30, 1)
    assert len(feasible) == 38
    assert {t.outaged[0] for t in feasible}.isdisjoint({13, 16, 34})
    assert [t.outaged for t in feasible] == sorted(t.outaged for t in feasible)


def test_two_bus_has_no_n1(two_bus):
    assert enumerate_feasible(two_bus(), 1) == []
