"""Static network model: case ingestion, bus admittance assembly and Kron reduction.

All quantities are per-unit on the case ``base_mva``. Machine parameters are
stored as given in the case file (machine base) and converted to the system
base through the ``*_sys`` properties.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Hashable, Iterable, Sequence

import numpy as np

BUS_KINDS = ("slack", "PV", "PQ")
IN_SERVICE = "in-service"
OUT = "out"

DATA_DIR = Path(__file__).parent / "data"


class CaseError(ValueError):
    """Case file failed schema or integrity validation."""


class KronError(np.linalg.LinAlgError):
    """Eliminated block is singular (an eliminated island has no retained node)."""


@dataclass(frozen=True)
class BusRecord:
    id: int
    kind: str
    voltage_setpoint: float = 1.0
    base_kv: float = 1.0
    load_p: float = 0.0
    load_q: float = 0.0
    shunt_g: float = 0.0
    shunt_b: float = 0.0


@dataclass(frozen=True)
class BranchRecord:
    id: str
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float = 0.0
    tap: float = 1.0
    status: str = IN_SERVICE

    @property
    def in_service(self) -> bool:
        return self.status == IN_SERVICE

    @property
    def z(self) -> complex:
        return complex(self.r, self.x)


@dataclass(frozen=True)
class MachineRecord:
    id: str
    bus: int
    h: float
    d: float
    xdp: float
    mva_base: float
    p_gen: float = 0.0
    q_gen: float = 0.0


@dataclass(frozen=True)
class NetworkCase:
    base_mva: float
    buses: tuple[BusRecord, ...]
    branches: tuple[BranchRecord, ...]
    machines: tuple[MachineRecord, ...]
    name: str = "case"

    @property
    def bus_ids(self) -> list[int]:
        return [b.id for b in self.buses]

    @property
    def bus_index(self) -> dict[int, int]:
        return {b.id: k for k, b in enumerate(self.buses)}

    @property
    def machine_ids(self) -> list[str]:
        return [m.id for m in self.machines]

    def branch(self, branch_id: str) -> BranchRecord:
        for br in self.branches:
            if br.id == branch_id:
                return br
        raise KeyError(branch_id)

    def machine(self, machine_id: str) -> MachineRecord:
        for m in self.machines:
            if m.id == machine_id:
                return m
        raise KeyError(machine_id)

    @property
    def loads(self) -> dict[int, complex]:
        """Per-bus complex load (only buses with a nonzero load)."""
        return {b.id: complex(b.load_p, b.load_q) for b in self.buses
                if b.load_p != 0.0 or b.load_q != 0.0}

    @property
    def total_load_p(self) -> float:
        return float(sum(b.load_p for b in self.buses))

    # machine parameters on the system base
    def h_sys(self) -> np.ndarray:
        return np.array([m.h * m.mva_base / self.base_mva for m in self.machines])

    def d_sys(self) -> np.ndarray:
        return np.array([m.d * m.mva_base / self.base_mva for m in self.machines])

    def xdp_sys(self) -> np.ndarray:
        return np.array([m.xdp * self.base_mva / m.mva_base for m in self.machines])

    def with_branch_status(self, branch_id: str, status: str) -> "NetworkCase":
        self.branch(branch_id)
        branches = tuple(replace(br, status=status) if br.id == branch_id else br
                         for br in self.branches)
        return replace(self, branches=branches)

    def scaled(self, load_scale: float = 1.0) -> "NetworkCase":
        """Scale every load and every machine dispatch by the same factor."""
        if load_scale == 1.0:
            return self
        buses = tuple(replace(b, load_p=b.load_p * load_scale, load_q=b.load_q * load_scale)
                      for b in self.buses)
        machines = tuple(replace(m, p_gen=m.p_gen * load_scale) for m in self.machines)
        return replace(self, buses=buses, machines=machines)

    def with_damping(self, d: float | dict[str, float]) -> "NetworkCase":
        if isinstance(d, dict):
            machines = tuple(replace(m, d=float(d.get(m.id, m.d))) for m in self.machines)
        else:
            machines = tuple(replace(m, d=float(d)) for m in self.machines)
        return replace(self, machines=machines)


@dataclass(frozen=True)
class AdmittanceMatrix:
    """Dense complex nodal admittance matrix with its node labels."""

    node_ids: tuple[Hashable, ...]
    entries: np.ndarray = field(repr=False)

    @property
    def order(self) -> int:
        return len(self.node_ids)

    def index(self) -> dict[Hashable, int]:
        return {n: k for k, n in enumerate(self.node_ids)}


@dataclass(frozen=True)
class ReducedNetwork:
    machine_ids: tuple[str, ...]
    y_red: np.ndarray = field(repr=False)

    @property
    def g(self) -> np.ndarray:
        return self.y_red.real

    @property
    def b(self) -> np.ndarray:
        return self.y_red.imag


# ---------------------------------------------------------------------------
# case ingestion

_BUS_FIELDS = {"id", "kind", "voltage_setpoint", "base_kv", "load_p", "load_q", "shunt_g", "shunt_b"}
_BRANCH_FIELDS = {"id", "from_bus", "to_bus", "r", "x", "b_charging", "tap", "status"}
_MACHINE_FIELDS = {"id", "bus", "h", "d", "xdp", "mva_base", "p_gen", "q_gen"}
_REQUIRED = {
    "buses": {"id", "kind"},
    "branches": {"id", "from_bus", "to_bus", "r", "x"},
    "machines": {"id", "bus", "h", "d", "xdp", "mva_base"},
}


def _records(doc: dict, section: str, allowed: set[str], cls):
    rows = doc.get(section)
    if not isinstance(rows, list):
        raise CaseError(f"section '{section}' missing or not a list")
    out = []
    for k, row in enumerate(rows):
        if not isinstance(row, dict):
            raise CaseError(f"{section}[{k}] is not a record")
        unknown = set(row) - allowed
        if unknown:
            raise CaseError(f"{section}[{k}] has unknown fields {sorted(unknown)}")
        missing = _REQUIRED[section] - set(row)
        if missing:
            raise CaseError(f"{section}[{k}] missing fields {sorted(missing)}")
        try:
            out.append(cls(**row))
        except TypeError as exc:
            raise CaseError(f"{section}[{k}]: {exc}") from None
    return out


def _connected(nodes: Iterable, edges: Iterable[tuple]) -> list[set]:
    adj: dict = {n: set() for n in nodes}
    for a, b in edges:
        adj[a].add(b)
        adj[b].add(a)
    seen: set = set()
    comps = []
    for n in adj:
        if n in seen:
            continue
        stack, comp = [n], set()
        while stack:
            v = stack.pop()
            if v in comp:
                continue
            comp.add(v)
            stack.extend(adj[v] - comp)
        seen |= comp
        comps.append(comp)
    return comps


def validate_case(case: NetworkCase) -> NetworkCase:
    ids = [b.id for b in case.buses]
    if len(set(ids)) != len(ids):
        raise CaseError("duplicate bus ids")
    for sec, recs in (("branch", case.branches), ("machine", case.machines)):
        rid = [r.id for r in recs]
        if len(set(rid)) != len(rid):
            raise CaseError(f"duplicate {sec} ids")
    if case.base_mva <= 0:
        raise CaseError("base_mva must be positive")
    for b in case.buses:
        if b.kind not in BUS_KINDS:
            raise CaseError(f"bus {b.id}: unknown kind {b.kind!r}")
        if b.kind != "PQ" and b.voltage_setpoint <= 0:
            raise CaseError(f"bus {b.id}: voltage_setpoint must be > 0")
    n_slack = sum(b.kind == "slack" for b in case.buses)
    if n_slack != 1:
        raise CaseError(f"expected exactly one slack bus, found {n_slack}")
    known = set(ids)
    for br in case.branches:
        if br.from_bus not in known or br.to_bus not in known:
            missing = br.to_bus if br.from_bus in known else br.from_bus
            raise CaseError(f"branch {br.id} references missing bus {missing}")
        if br.from_bus == br.to_bus:
            raise CaseError(f"branch {br.id} connects bus {br.from_bus} to itself")
        if br.x == 0:
            raise CaseError(f"branch {br.id} has x = 0")
        if br.status not in (IN_SERVICE, OUT):
            raise CaseError(f"branch {br.id}: unknown status {br.status!r}")
        if br.tap <= 0:
            raise CaseError(f"branch {br.id}: tap must be positive")
    for m in case.machines:
        if m.bus not in known:
            raise CaseError(f"machine {m.id} references missing bus {m.bus}")
        if m.h <= 0 or m.xdp <= 0 or m.mva_base <= 0:
            raise CaseError(f"machine {m.id}: h, xdp and mva_base must be positive")
    comps = _connected(ids, [(br.from_bus, br.to_bus) for br in case.branches if br.in_service])
    if len(comps) > 1:
        raise CaseError(f"network is disconnected ({len(comps)} components)")
    return case


def parse_case(doc: dict) -> NetworkCase:
    if not isinstance(doc, dict) or "base_mva" not in doc:
        raise CaseError("case document must be an object with 'base_mva'")
    case = NetworkCase(
        base_mva=float(doc["base_mva"]),
        buses=tuple(_records(doc, "buses", _BUS_FIELDS, BusRecord)),
        branches=tuple(_records(doc, "branches", _BRANCH_FIELDS, BranchRecord)),
        machines=tuple(_records(doc, "machines", _MACHINE_FIELDS, MachineRecord)) if "machines" in doc else (),
        name=str(doc.get("name", "case")),
    )
    return validate_case(case)


def load_case(source: bytes | str) -> NetworkCase:
    """Parse and validate case-file contents (JSON text)."""
    if isinstance(source, bytes):
        source = source.decode("utf-8")
    try:
        doc = json.loads(source)
    except json.JSONDecodeError as exc:
        raise CaseError(f"case file is not valid JSON: {exc}") from None
    return parse_case(doc)


def load_case_file(path: str | Path) -> NetworkCase:
    return load_case(Path(path).read_bytes())


def ieee39() -> NetworkCase:
    """The bundled 10-machine, 39-bus New England case."""
    return load_case_file(DATA_DIR / "case39.json")


def case_to_dict(case: NetworkCase) -> dict:
    from dataclasses import asdict
    return {
        "name": case.name,
        "base_mva": case.base_mva,
        "buses": [asdict(b) for b in case.buses],
        "branches": [asdict(b) for b in case.branches],
        "machines": [asdict(m) for m in case.machines],
    }


# ---------------------------------------------------------------------------
# admittance assembly

def branch_stamp(br: BranchRecord) -> np.ndarray:
    """2x2 primitive admittance [[yff, yft], [ytf, ytt]] with the tap on the from side."""
    ys = 1.0 / complex(br.r, br.x)
    bc = 1j * br.b_charging / 2.0
    t = br.tap
    return np.array([[(ys + bc) / (t * t), -ys / t],
                     [-ys / t, ys + bc]])


def stamp(y: np.ndarray, i: int, j: int, prim: np.ndarray, sign: float = 1.0) -> None:
    y[i, i] += sign * prim[0, 0]
    y[i, j] += sign * prim[0, 1]
    y[j, i] += sign * prim[1, 0]
    y[j, j] += sign * prim[1, 1]


def build_ybus(case: NetworkCase) -> AdmittanceMatrix:
    idx = case.bus_index
    n = len(case.buses)
    y = np.zeros((n, n), dtype=complex)
    for br in case.branches:
        if not br.in_service:
            continue
        if br.x == 0:
            raise CaseError(f"branch {br.id} has x = 0")
        stamp(y, idx[br.from_bus], idx[br.to_bus], branch_stamp(br))
    for k, b in enumerate(case.buses):
        y[k, k] += complex(b.shunt_g, b.shunt_b)
    return AdmittanceMatrix(tuple(case.bus_ids), y)


def internal_node(machine_id: str) -> tuple[str, str]:
    return ("E", machine_id)


def augmented_ybus(case: NetworkCase, voltages: np.ndarray) -> AdmittanceMatrix:
    """Bus matrix plus constant-impedance loads and machine internal nodes.

    ``voltages`` are the power-flow bus voltages used to convert loads to
    shunt admittances. Internal nodes are appended in case machine order.
    """
    ybus = build_ybus(case)
    n = ybus.order
    m = len(case.machines)
    y = np.zeros((n + m, n + m), dtype=complex)
    y[:n, :n] = ybus.entries
    vm2 = np.abs(np.asarray(voltages)) ** 2
    for k, b in enumerate(case.buses):
        y[k, k] += complex(b.load_p, -b.load_q) / vm2[k]
    idx = case.bus_index
    for k, (mach, xdp) in enumerate(zip(case.machines, case.xdp_sys())):
        ym = 1.0 / (1j * xdp)
        i, j = idx[mach.bus], n + k
        y[i, i] += ym
        y[j, j] += ym
        y[i, j] -= ym
        y[j, i] -= ym
    nodes = tuple(case.bus_ids) + tuple(internal_node(mm.id) for mm in case.machines)
    return AdmittanceMatrix(nodes, y)


def schur_parts(y: np.ndarray, keep: Sequence[int], elim: Sequence[int]):
    """Return (y_red, recon) with y_red = Yrr - Yre Yee^-1 Yer and recon = -Yee^-1 Yer.

    ``recon`` maps retained-node voltages to eliminated-node voltages.
    """
    keep = np.asarray(keep, dtype=int)
    elim = np.asarray(elim, dtype=int)
    yrr = y[np.ix_(keep, keep)]
    if elim.size == 0:
        return yrr.copy(), np.zeros((0, keep.size), dtype=complex)
    yee = y[np.ix_(elim, elim)]
    yer = y[np.ix_(elim, keep)]
    yre = y[np.ix_(keep, elim)]
    try:
        recon = -np.linalg.solve(yee, yer)
    except np.linalg.LinAlgError:
        raise KronError("eliminated block is singular: isolated island without retained nodes") from None
    if not np.all(np.isfinite(recon)) or np.linalg.cond(yee) > 1e14:
        raise KronError("eliminated block is singular: isolated island without retained nodes")
    return yrr + yre @ recon, recon


def kron_reduce(y_aug: AdmittanceMatrix, retained: Iterable[Hashable]) -> ReducedNetwork:
    """Eliminate every node not in ``retained``; retained order follows ``y_aug``."""
    retained = set(retained)
    missing = retained - set(y_aug.node_ids)
    if missing:
        raise KeyError(f"retained nodes not in matrix: {sorted(map(str, missing))}")
    keep = [k for k, n in enumerate(y_aug.node_ids) if n in retained]
    elim = [k for k, n in enumerate(y_aug.node_ids) if n not in retained]
    y_red, _ = schur_parts(y_aug.entries, keep, elim)
    ids = tuple(y_aug.node_ids[k][1] if isinstance(y_aug.node_ids[k], tuple) else y_aug.node_ids[k]
                for k in keep)
    return ReducedNetwork(ids, y_red)
