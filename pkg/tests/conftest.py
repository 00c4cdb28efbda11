import json

import numpy as np
import pytest

from gridkernel.acpf import generate_dataset, sample_injections, solve_category
from gridkernel.netcase import apply_outage, base_topology, load_case, parse_case
from gridkernel.transfer import train_sources


def two_bus_text(p_mw=50.0, q_mvar=20.0, r=0.0, x=0.1, b=0.0):
    """Slack bus 1 feeding a PQ load at bus 2 over one line."""
    return json.dumps({
        "name": "two_bus",
        "base_mva": 100.0,
        "buses": [
            {"id": 1, "type": "slack", "p_load": 0.0, "q_load": 0.0, "v_setpoint": 1.0},
            {"id": 2, "type": "pq", "p_load": p_mw, "q_load": q_mvar},
        ],
        "branches": [{"id": 1, "from": 1, "to": 2, "r": r, "x": x, "b_charging": b}],
        "gens": [{"bus": 1, "p_set": 0.0, "v_set": 1.0}],
    })


@pytest.fixture(scope="session")
def case30():
    return load_case("case30")


@pytest.fixture(scope="session")
def base30(case30):
    return base_topology(case30)


@pytest.fixture
def two_bus():
    return lambda **kw: parse_case(two_bus_text(**kw))


@pytest.fixture(scope="session")
def data30(case30):
    """Training (40) and test (60) sets for V_4 on the N-1:12 topology."""
    topo = apply_outage(base_topology(case30), [12])
    with solve_category("test"):
        train = generate_dataset(case30, topo, sample_injections(case30, 0.1, 40, 101), [4, 6])
        test = generate_dataset(case30, topo, sample_injections(case30, 0.1, 60, 202), [4, 6])
    return topo, train, test


@pytest.fixture(scope="session")
def small_registry(case30):
    """Node-4 source VDKs on base, N-1:1 and N-1:10, cheaply trained."""
    with solve_category("test"):
        return train_sources(case30, [4], (1, 10), n_samples=40, iters=10, seed=5)[4]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion(capsys):
    """Record and echo one acceptance line: ``criterion(n, passed, detail)``."""

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"CRITERION {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        _CRITERIA[number] = line
        with capsys.disabled():
            print(f"\n{line}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
