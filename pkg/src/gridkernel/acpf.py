"""Newton-Raphson AC power flow, load sampling and dataset generation.

Injection vectors are flat arrays of length ``2 * n_bus`` with real and
reactive parts interleaved per bus: ``[p_0, q_0, p_1, q_1, ...]`` in
per-unit, injection = generation - demand.
"""

from __future__ import annotations

import hashlib
import itertools
import logging
import threading
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, field

import numpy as np

from .errors import DatasetError, TopologyError, ValidationError
from .netcase import (
    GridCase,
    Topology,
    apply_outage,
    base_topology,
    build_ybus,
    is_connected,
)

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 20


class SolveCounter:
    """Process-wide tally of Newton-Raphson solves, split by category."""

    def __init__(self):
        self._lock = threading.Lock()
        self.by_category: dict[str, int] = {}

    def increment(self, category: str | None = None, n: int = 1) -> None:
        category = category or _category.get()
        with self._lock:
            self.by_category[category] = self.by_category.get(category, 0) + n

    @property
    def total(self) -> int:
        with self._lock:
            return sum(self.by_category.values())

    def get(self, category: str) -> int:
        with self._lock:
            return self.by_category.get(category, 0)

    def snapshot(self) -> dict[str, int]:
        with self._lock:
            return dict(self.by_category)


SOLVES = SolveCounter()
_category: ContextVar[str] = ContextVar("solve_category", default="other")


@contextmanager
def solve_category(name: str):
    """Attribute every solve made inside the block to ``name``."""
    token = _category.set(name)
    try:
        yield
    finally:
        _category.reset(token)


def stream_seed(seed: int, *keys) -> int:
    """Derive an independent, portable 64-bit seed from a master seed and labels."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed)).encode())
    for k in keys:
        h.update(b"\x1f" + str(k).encode())
    return int.from_bytes(h.digest(), "little")


def rng_for(seed: int, *keys) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(stream_seed(seed, *keys)))


# --------------------------------------------------------------------------
# injections


def base_injection(case: GridCase) -> np.ndarray:
    p = case.p_gen - case.p_load
    q = -case.q_load
    return interleave(p, q)


def interleave(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    out = np.empty(p.shape[:-1] + (2 * p.shape[-1],))
    out[..., 0::2] = p
    out[..., 1::2] = q
    return out


def split(s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(s, dtype=float)
    return s[..., 0::2], s[..., 1::2]


@dataclass(frozen=True)
class SampleSet:
    injections: np.ndarray
    seed: int
    hypercube_fraction: float
    topology_label: str = ""

    def __len__(self):
        return len(self.injections)


def sample_injections(case: GridCase, fraction: float, count: int, seed: int,
                      label: str = "") -> SampleSet:
    """Draw ``count`` injections with every nonzero load scaled by U[1-f, 1+f].

    Each p and q load coordinate gets its own draw; generator set-points stay
    at the case values.
    """
    if not 0 <= fraction < 1:
        raise ValidationError(f"hypercube fraction must lie in [0, 1), got {fraction}")
    if count <= 0:
        raise ValidationError(f"sample count must be positive, got {count}")
    rng = np.random.Generator(np.random.PCG64(seed))
    n = case.n_bus
    mult = rng.uniform(1.0 - fraction, 1.0 + fraction, size=(count, 2, n))
    pd = case.p_load * mult[:, 0]
    qd = case.q_load * mult[:, 1]
    inj = interleave(case.p_gen - pd, -qd)
    return SampleSet(inj, seed, fraction, label)


# --------------------------------------------------------------------------
# Newton-Raphson


@dataclass(frozen=True)
class PfSolution:
    v_mag: np.ndarray
    v_ang: np.ndarray
    converged: bool
    iterations: int
    max_mismatch: float
    reason: str = ""

    @property
    def voltage(self) -> np.ndarray:
        return self.v_mag * np.exp(1j * self.v_ang)


def _newton(Y, sbus, V0, pv, pq, tol, max_iter):
    V = V0.astype(complex)
    Vm = np.abs(V)
    Va = np.angle(V)
    pvpq = np.r_[pv, pq]
    npvpq, npq = len(pvpq), len(pq)

    def mismatch(V):
        mis = V * np.conj(Y @ V) - sbus
        return np.r_[mis[pvpq].real, mis[pq].imag]

    F = mismatch(V)
    norm = np.max(np.abs(F)) if F.size else 0.0
    it = 0
    while norm >= tol and it < max_iter:
        it += 1
        Ibus = Y @ V
        Vnorm = V / np.abs(V)
        dS_dVm = V[:, None] * np.conj(Y * Vnorm[None, :]) + np.diag(np.conj(Ibus) * Vnorm)
        dS_dVa = 1j * V[:, None] * np.conj(np.diag(Ibus) - Y * V[None, :])
        J = np.block([
            [dS_dVa[np.ix_(pvpq, pvpq)].real, dS_dVm[np.ix_(pvpq, pq)].real],
            [dS_dVa[np.ix_(pq, pvpq)].imag, dS_dVm[np.ix_(pq, pq)].imag],
        ])
        try:
            dx = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            return V, it, norm, "singular Jacobian"
        Va[pvpq] += dx[:npvpq]
        Vm[pq] += dx[npvpq:npvpq + npq]
        V = Vm * np.exp(1j * Va)
        F = mismatch(V)
        norm = np.max(np.abs(F))
        if not np.isfinite(norm):
            return V, it, norm, "diverged"
    reason = "" if norm < tol else "iteration limit reached"
    return V, it, norm, reason


def _start_voltage(case: GridCase, start: str) -> np.ndarray:
    if start == "flat":
        vm = np.ones(case.n_bus)
        va = np.zeros(case.n_bus)
    elif start == "case":
        vm = np.array([b.v_init for b in case.buses])
        va = np.array([b.a_init for b in case.buses])
        va = va - va[case.slack]
    else:
        raise ValidationError(f"unknown start {start!r}")
    for i, b in enumerate(case.buses):
        if b.type != "pq":
            vm[i] = b.v_setpoint
    return vm * np.exp(1j * va)


class _Solver:
    """Topology-bound solver; builds the Y-bus once for many solves."""

    def __init__(self, case: GridCase, topo: Topology, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER,
                 start="flat"):
        if not is_connected(case, topo):
            raise TopologyError(f"topology {topo.label!r} is disconnected")
        self.case = case
        self.Y = build_ybus(case, topo)
        self.tol = tol
        self.max_iter = max_iter
        self.V0 = _start_voltage(case, start)

    def __call__(self, inj: np.ndarray) -> PfSolution:
        case = self.case
        inj = np.asarray(inj, dtype=float)
        if inj.shape != (2 * case.n_bus,):
            raise ValidationError(f"injection has shape {inj.shape}, expected ({2 * case.n_bus},)")
        if not np.all(np.isfinite(inj)):
            raise ValidationError("injection contains non-finite entries")
        p, q = split(inj)
        SOLVES.increment()
        V, it, norm, reason = _newton(self.Y, p + 1j * q, self.V0, case.pv, case.pq,
                                      self.tol, self.max_iter)
        return PfSolution(np.abs(V), np.angle(V), not reason, it, float(norm), reason)


def solve_nr(case: GridCase, topo: Topology, inj: np.ndarray, tol: float = DEFAULT_TOL,
             max_iter: int = DEFAULT_MAX_ITER, start: str = "flat") -> PfSolution:
    """Solve the AC power flow in polar form by Newton-Raphson.

    PV buses hold their voltage set-point (reactive limits are not enforced).
    """
    return _Solver(case, topo, tol, max_iter, start)(inj)


def power_mismatch(case: GridCase, topo: Topology, inj: np.ndarray, sol: PfSolution) -> np.ndarray:
    """Complex mismatch S_calc - S_spec at every bus."""
    Y = build_ybus(case, topo)
    V = sol.voltage
    p, q = split(inj)
    return V * np.conj(Y @ V) - (p + 1j * q)


# --------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class PfDataset:
    """Solved samples for one topology: inputs and all bus voltage magnitudes."""

    inputs: np.ndarray
    v_mag: np.ndarray
    topology_label: str
    bus_ids: np.ndarray
    solves: int = 0
    rejected: int = 0
    target_nodes: tuple[int, ...] = field(default=())

    def __len__(self):
        return len(self.inputs)

    def voltages(self, node: int) -> np.ndarray:
        col = int(np.flatnonzero(self.bus_ids == node)[0])
        return self.v_mag[:, col]

    def training_set(self, node: int):
        from .gpr import TrainingSet

        return TrainingSet(self.inputs, self.voltages(node), node, self.topology_label)


def generate_dataset(case: GridCase, topo: Topology, samples, target_nodes=(),
                     tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
                     max_reject_rate: float = 0.01) -> PfDataset:
    """Solve one power flow per sample and collect bus voltage magnitudes.

    Non-converged samples are dropped and counted; a rejection rate above
    ``max_reject_rate`` raises :class:`DatasetError`.
    """
    inj = samples.injections if isinstance(samples, SampleSet) else np.asarray(samples, dtype=float)
    inj = inj.reshape(-1, 2 * case.n_bus)
    for node in target_nodes:
        if node not in case.index:
            raise ValidationError(f"unknown target bus {node}")
    if len(inj) == 0:
        return PfDataset(inj, np.zeros((0, case.n_bus)), topo.label, case.bus_ids, 0, 0,
                         tuple(target_nodes))
    solver = _Solver(case, topo, tol, max_iter)
    keep, vm = [], []
    for k, s in enumerate(inj):
        sol = solver(s)
        if sol.converged:
            keep.append(k)
            vm.append(sol.v_mag)
    rejected = len(inj) - len(keep)
    if rejected > max_reject_rate * len(inj):
        raise DatasetError(f"{rejected}/{len(inj)} samples failed to converge on {topo.label}")
    if rejected:
        log.warning("%s: dropped %d non-converged samples", topo.label, rejected)
    return PfDataset(inj[keep], np.array(vm), topo.label, case.bus_ids, len(inj), rejected,
                     tuple(target_nodes))


def enumerate_feasible(case: GridCase, k: int) -> list[Topology]:
    """All k-branch outages that stay connected and converge at base load."""
    if k not in (1, 2):
        raise ValidationError("k must be 1 or 2")
    base = base_topology(case)
    inj = base_injection(case)
    candidates = [b for b, on in zip(base.branch_ids, base.in_service) if on]
    feasible = []
    examined = 0
    for combo in itertools.combinations(sorted(candidates), k):
        examined += 1
        topo = apply_outage(base, combo)
        if not is_connected(case, topo):
            continue
        if solve_nr(case, topo, inj).converged:
            feasible.append(topo)
    log.info("N-%d: %d of %d candidate topologies feasible", k, len(feasible), examined)
    return feasible
