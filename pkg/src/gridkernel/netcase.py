"""Grid case parsing, topologies, admittance matrices and node neighborhoods.

Quantities inside a :class:`GridCase` are per-unit on ``base_mva``. Bus ids
from the case file are kept for I/O; everything numerical works on the dense
0-based bus index (``case.index[bus_id]``).
"""

from __future__ import annotations

import hashlib
import json
import re
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import CaseParseError, TopologyError, ValidationError

BUS_TYPES = {1: "pq", 2: "pv", 3: "slack"}


@dataclass(frozen=True)
class Bus:
    id: int
    type: str
    p_load: float
    q_load: float
    v_setpoint: float
    base_kv: float
    gs: float = 0.0
    bs: float = 0.0
    v_init: float = 1.0
    a_init: float = 0.0


@dataclass(frozen=True)
class Branch:
    id: int
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float = 0.0
    tap: float = 1.0
    in_service: bool = True


@dataclass(frozen=True)
class Gen:
    bus: int
    p_set: float
    v_set: float
    q_min: float = -np.inf
    q_max: float = np.inf


@dataclass(frozen=True)
class GridCase:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    gens: tuple[Gen, ...]
    base_mva: float = 100.0
    name: str = "case"

    def __post_init__(self):
        _validate(self)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @cached_property
    def index(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @cached_property
    def bus_ids(self) -> np.ndarray:
        return np.array([b.id for b in self.buses])

    @cached_property
    def slack(self) -> int:
        return next(i for i, b in enumerate(self.buses) if b.type == "slack")

    @cached_property
    def pv(self) -> np.ndarray:
        return np.array([i for i, b in enumerate(self.buses) if b.type == "pv"], dtype=int)

    @cached_property
    def pq(self) -> np.ndarray:
        return np.array([i for i, b in enumerate(self.buses) if b.type == "pq"], dtype=int)

    @cached_property
    def branch_ids(self) -> tuple[int, ...]:
        return tuple(br.id for br in self.branches)

    def branch(self, branch_id: int) -> Branch:
        for br in self.branches:
            if br.id == branch_id:
                return br
        raise TopologyError(f"unknown branch id {branch_id}")

    @cached_property
    def p_gen(self) -> np.ndarray:
        out = np.zeros(self.n_bus)
        for g in self.gens:
            out[self.index[g.bus]] += g.p_set
        return out

    @cached_property
    def p_load(self) -> np.ndarray:
        return np.array([b.p_load for b in self.buses])

    @cached_property
    def q_load(self) -> np.ndarray:
        return np.array([b.q_load for b in self.buses])

    @cached_property
    def fingerprint(self) -> str:
        """Content hash, used to check that models refer to the same network."""
        blob = json.dumps(case_to_dict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _validate(case: GridCase) -> None:
    ids = [b.id for b in case.buses]
    if len(set(ids)) != len(ids):
        raise ValidationError("bus ids are not unique")
    n_slack = sum(b.type == "slack" for b in case.buses)
    if n_slack != 1:
        raise ValidationError(f"expected exactly one slack bus, found {n_slack}")
    known = set(ids)
    if not case.branches:
        raise ValidationError("case has no branches (network is disconnected)")
    branch_ids = [br.id for br in case.branches]
    if len(set(branch_ids)) != len(branch_ids):
        raise ValidationError("branch ids are not unique")
    for br in case.branches:
        if br.from_bus not in known or br.to_bus not in known:
            raise ValidationError(f"branch {br.id} references an undeclared bus")
        if br.r < 0:
            raise ValidationError(f"branch {br.id} has negative resistance")
        if br.x == 0:
            raise ValidationError(f"branch {br.id} has zero reactance")
        if br.tap <= 0:
            raise ValidationError(f"branch {br.id} has non-positive tap ratio")
    for g in case.gens:
        if g.bus not in known:
            raise ValidationError(f"generator references undeclared bus {g.bus}")
    if case.base_mva <= 0:
        raise ValidationError("base_mva must be positive")


# --------------------------------------------------------------------------
# parsing

_ASSIGN = re.compile(r"^\s*mpc\.(\w+)\s*=\s*(.*)$")


def _strip_comment(line: str) -> str:
    return line.split("%", 1)[0]


def _read_matpower(text: str) -> tuple[float, dict[str, list[tuple[int, list[float]]]], str]:
    matrices: dict[str, list[tuple[int, list[float]]]] = {}
    base_mva = None
    name = "case"
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        if current is None:
            m = re.match(r"^function\s+\w+\s*=\s*(\w+)", line)
            if m:
                name = m.group(1)
                continue
            m = _ASSIGN.match(line)
            if not m:
                continue
            key, rest = m.group(1), m.group(2).strip()
            if key == "baseMVA":
                try:
                    base_mva = float(rest.rstrip(";").strip())
                except ValueError:
                    raise CaseParseError(f"bad baseMVA value {rest!r}", lineno) from None
                continue
            if not rest.startswith("["):
                continue
            current = key
            matrices[key] = []
            line = rest[1:]
        closing = "]" in line
        if closing:
            line = line.split("]", 1)[0]
        for chunk in line.split(";"):
            tokens = chunk.replace(",", " ").split()
            if not tokens:
                continue
            try:
                matrices[current].append((lineno, [float(t) for t in tokens]))
            except ValueError:
                raise CaseParseError(f"malformed row in mpc.{current}: {chunk.strip()!r}", lineno) from None
        if closing:
            current = None
    if current is not None:
        raise CaseParseError(f"unterminated matrix mpc.{current}")
    if base_mva is None:
        raise CaseParseError("missing mpc.baseMVA")
    for key in ("bus", "gen", "branch"):
        if key not in matrices:
            raise CaseParseError(f"missing mpc.{key}")
    return base_mva, matrices, name


def _need(row: list[float], n: int, what: str, lineno: int) -> None:
    if len(row) < n:
        raise CaseParseError(f"{what} row has {len(row)} columns, need at least {n}", lineno)


def parse_matpower(text: str) -> GridCase:
    base_mva, mats, name = _read_matpower(text)

    gens = []
    gen_buses = set()
    for lineno, row in mats["gen"]:
        _need(row, 8, "gen", lineno)
        if row[7] <= 0:
            continue
        bus = int(row[0])
        gens.append(Gen(bus=bus, p_set=row[1] / base_mva, v_set=row[5],
                        q_min=row[4] / base_mva, q_max=row[3] / base_mva))
        gen_buses.add(bus)
    vset = {}
    for g in gens:
        vset.setdefault(g.bus, g.v_set)

    buses = []
    for lineno, row in mats["bus"]:
        _need(row, 10, "bus", lineno)
        bus_id, kind = int(row[0]), int(row[1])
        if kind not in BUS_TYPES:
            raise CaseParseError(f"unsupported bus type {kind} at bus {bus_id}", lineno)
        btype = BUS_TYPES[kind]
        if btype == "pv" and bus_id not in gen_buses:
            btype = "pq"
        if btype == "slack" and bus_id not in gen_buses:
            raise CaseParseError(f"slack bus {bus_id} has no in-service generator", lineno)
        buses.append(Bus(id=bus_id, type=btype, p_load=row[2] / base_mva, q_load=row[3] / base_mva,
                         v_setpoint=vset.get(bus_id, row[7]), base_kv=row[9],
                         gs=row[4] / base_mva, bs=row[5] / base_mva,
                         v_init=row[7], a_init=np.deg2rad(row[8])))

    branches = []
    for k, (lineno, row) in enumerate(mats["branch"], start=1):
        _need(row, 11, "branch", lineno)
        if row[9] != 0:
            raise CaseParseError(f"branch {k}: phase shifting transformers are not supported", lineno)
        if row[2] == 0 and row[3] == 0:
            raise CaseParseError(f"branch {k}: zero series impedance", lineno)
        branches.append(Branch(id=k, from_bus=int(row[0]), to_bus=int(row[1]), r=row[2], x=row[3],
                               b_charging=row[4], tap=row[8] if row[8] != 0 else 1.0,
                               in_service=row[10] > 0))

    case = GridCase(tuple(buses), tuple(branches), tuple(gens), base_mva, name)
    if not is_connected(case, base_topology(case)):
        raise ValidationError("base topology of the case is disconnected")
    return case


def case_to_dict(case: GridCase) -> dict:
    """JSON mirror of a case, in MW / MVAr like the MATPOWER source."""
    mva = case.base_mva
    return {
        "name": case.name,
        "base_mva": mva,
        "buses": [
            {"id": b.id, "type": b.type, "p_load": b.p_load * mva, "q_load": b.q_load * mva,
             "v_setpoint": b.v_setpoint, "base_kv": b.base_kv, "gs": b.gs * mva, "bs": b.bs * mva,
             "v_init": b.v_init, "a_init": b.a_init}
            for b in case.buses
        ],
        "branches": [
            {"id": br.id, "from": br.from_bus, "to": br.to_bus, "r": br.r, "x": br.x,
             "b_charging": br.b_charging, "tap": br.tap, "in_service": br.in_service}
            for br in case.branches
        ],
        "gens": [
            {"bus": g.bus, "p_set": g.p_set * mva, "v_set": g.v_set,
             "q_min": g.q_min * mva, "q_max": g.q_max * mva}
            for g in case.gens
        ],
    }


def case_from_dict(d: dict) -> GridCase:
    try:
        mva = float(d["base_mva"])
        buses = tuple(
            Bus(id=int(b["id"]), type=b["type"], p_load=b["p_load"] / mva, q_load=b["q_load"] / mva,
                v_setpoint=b.get("v_setpoint", 1.0), base_kv=b.get("base_kv", 1.0),
                gs=b.get("gs", 0.0) / mva, bs=b.get("bs", 0.0) / mva,
                v_init=b.get("v_init", b.get("v_setpoint", 1.0)), a_init=b.get("a_init", 0.0))
            for b in d["buses"]
        )
        branches = tuple(
            Branch(id=int(br.get("id", k)), from_bus=int(br["from"]), to_bus=int(br["to"]),
                   r=br["r"], x=br["x"], b_charging=br.get("b_charging", 0.0),
                   tap=br.get("tap") or 1.0, in_service=br.get("in_service", True))
            for k, br in enumerate(d["branches"], start=1)
        )
        gens = tuple(
            Gen(bus=int(g["bus"]), p_set=g["p_set"] / mva, v_set=g.get("v_set", 1.0),
                q_min=g.get("q_min", -np.inf) / mva, q_max=g.get("q_max", np.inf) / mva)
            for g in d["gens"]
        )
    except (KeyError, TypeError) as exc:
        raise CaseParseError(f"bad JSON case: {exc}") from None
    for b in buses:
        if b.type not in ("slack", "pv", "pq"):
            raise ValidationError(f"bus {b.id}: unknown type {b.type!r}")
    case = GridCase(buses, branches, gens, mva, d.get("name", "case"))
    if not is_connected(case, base_topology(case)):
        raise ValidationError("base topology of the case is disconnected")
    return case


def parse_case(text: str) -> GridCase:
    """Parse MATPOWER ``.m`` text or its JSON mirror."""
    if text.lstrip().startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise CaseParseError(str(exc), exc.lineno) from None
        return case_from_dict(data)
    return parse_matpower(text)


BUNDLED = {"case30": "case30.m"}


def load_case(path_or_name: str | Path) -> GridCase:
    """Load a case from a path, a bundled name (``case30``), or ``$GRIDKERNEL_CASE_DIR``."""
    import os
    from importlib import resources

    p = Path(path_or_name)
    if not p.exists():
        case_dir = os.environ.get("GRIDKERNEL_CASE_DIR")
        candidates = []
        if case_dir:
            candidates += [Path(case_dir) / p, Path(case_dir) / f"{p}.m", Path(case_dir) / f"{p}.json"]
        for c in candidates:
            if c.exists():
                p = c
                break
        else:
            if str(path_or_name) in BUNDLED:
                res = resources.files("gridkernel") / "data" / BUNDLED[str(path_or_name)]
                return parse_case(res.read_text())
            raise ValidationError(f"case not found: {path_or_name}")
    return parse_case(p.read_text())


# --------------------------------------------------------------------------
# topologies


@dataclass(frozen=True)
class Topology:
    case_id: str
    branch_ids: tuple[int, ...]
    in_service: tuple[bool, ...]
    label: str = field(default="")

    def __post_init__(self):
        if len(self.in_service) != len(self.branch_ids):
            raise TopologyError("in_service mask length differs from branch count")
        object.__setattr__(self, "label", _label(self.outaged))

    @property
    def outaged(self) -> tuple[int, ...]:
        return tuple(sorted(b for b, on in zip(self.branch_ids, self.in_service) if not on))

    @property
    def n_in_service(self) -> int:
        return sum(self.in_service)


def _label(out: tuple[int, ...]) -> str:
    if not out:
        return "base"
    return f"N-{len(out)}:" + ",".join(str(b) for b in out)


def base_topology(case: GridCase) -> Topology:
    return Topology(case.fingerprint, case.branch_ids, tuple(br.in_service for br in case.branches))


def _check_ref(case: GridCase, topo: Topology) -> None:
    if topo.case_id != case.fingerprint:
        raise TopologyError(f"topology {topo.label!r} belongs to a different case")


def apply_outage(topo: Topology, branch_ids) -> Topology:
    mask = dict(zip(topo.branch_ids, topo.in_service))
    for b in branch_ids:
        if b not in mask:
            raise TopologyError(f"unknown branch id {b}")
        if not mask[b]:
            raise TopologyError(f"branch {b} is already out of service")
        mask[b] = False
    return Topology(topo.case_id, topo.branch_ids, tuple(mask[b] for b in topo.branch_ids))


def restore(topo: Topology, branch_ids) -> Topology:
    mask = dict(zip(topo.branch_ids, topo.in_service))
    for b in branch_ids:
        if b not in mask:
            raise TopologyError(f"unknown branch id {b}")
        if mask[b]:
            raise TopologyError(f"branch {b} is already in service")
        mask[b] = True
    return Topology(topo.case_id, topo.branch_ids, tuple(mask[b] for b in topo.branch_ids))


def topology_from_label(case: GridCase, label: str) -> Topology:
    base = base_topology(case)
    if label == "base":
        return base
    m = re.fullmatch(r"N-(\d+):([\d,]+)", label)
    if not m:
        raise TopologyError(f"malformed topology label {label!r}")
    out = [int(b) for b in m.group(2).split(",")]
    if len(out) != int(m.group(1)):
        raise TopologyError(f"malformed topology label {label!r}")
    return apply_outage(base, out)


def active_branches(case: GridCase, topo: Topology):
    _check_ref(case, topo)
    return [br for br, on in zip(case.branches, topo.in_service) if on]


def is_connected(case: GridCase, topo: Topology) -> bool:
    """True iff every bus is reachable from the slack over in-service branches."""
    adj = [[] for _ in range(case.n_bus)]
    idx = case.index
    for br in active_branches(case, topo):
        f, t = idx[br.from_bus], idx[br.to_bus]
        adj[f].append(t)
        adj[t].append(f)
    seen = {case.slack}
    queue = deque([case.slack])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                queue.append(v)
    return len(seen) == case.n_bus


def build_ybus(case: GridCase, topo: Topology) -> np.ndarray:
    """Dense complex bus admittance matrix (per-unit) for the given topology.

    Bus shunts (Gs, Bs) are stamped on the diagonal.
    """
    n = case.n_bus
    Y = np.zeros((n, n), dtype=complex)
    idx = case.index
    for br in active_branches(case, topo):
        if br.r == 0 and br.x == 0:
            raise ValidationError(f"branch {br.id} has zero series impedance")
        f, t = idx[br.from_bus], idx[br.to_bus]
        ys = 1.0 / complex(br.r, br.x)
        half_b = 0.5j * br.b_charging
        tap = br.tap
        Y[f, f] += (ys + half_b) / tap**2
        Y[t, t] += ys + half_b
        Y[f, t] -= ys / tap
        Y[t, f] -= ys / tap
    for i, b in enumerate(case.buses):
        Y[i, i] += complex(b.gs, b.bs)
    return Y


@dataclass(frozen=True)
class Neighborhoods:
    """Per-node neighbor sets (dense bus indices, ascending, self included)."""

    members: tuple[tuple[int, ...], ...]
    label: str = ""

    @property
    def n_nodes(self) -> int:
        return len(self.members)

    def columns(self, n: int) -> np.ndarray:
        """Injection-vector columns read by node ``n``'s sub-kernel, (p, q) interleaved."""
        m = np.asarray(self.members[n], dtype=int)
        return np.stack([2 * m, 2 * m + 1], axis=1).ravel()

    def to_dict(self) -> dict:
        return {"label": self.label, "members": [list(m) for m in self.members]}

    @classmethod
    def from_dict(cls, d: dict) -> "Neighborhoods":
        return cls(tuple(tuple(int(i) for i in m) for m in d["members"]), d.get("label", ""))


def neighborhoods(case: GridCase, topo: Topology) -> Neighborhoods:
    sets = [{i} for i in range(case.n_bus)]
    idx = case.index
    for br in active_branches(case, topo):
        f, t = idx[br.from_bus], idx[br.to_bus]
        sets[f].add(t)
        sets[t].add(f)
    return Neighborhoods(tuple(tuple(sorted(s)) for s in sets), topo.label)
