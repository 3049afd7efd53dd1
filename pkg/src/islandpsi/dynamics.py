"""Classical-model swing-equation simulator with an event scheduler.

The network is rebuilt and Kron-reduced on every topology change. Each
energized connected component (an island holding at least one in-service
machine) is reduced and integrated on its own, so islands never share
numerical state. Components without a machine are de-energized.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterable, Protocol, Sequence

import numpy as np

from . import kernels
from .grid import NetworkCase, ReducedNetwork, branch_stamp, schur_parts, stamp
from .powerflow import DynamicInit, load_admittances

F_NOMINAL = 60.0
WS = 2.0 * math.pi * F_NOMINAL
FAULT_IMPEDANCE = complex(1e-6, 1e-6)

FAULT = "apply_three_phase_fault"
CLEAR = "clear_fault"
TRIP_BRANCH = "trip_branch"
TRIP_MACHINE = "trip_machine"
TRIP_LOAD = "trip_load"
EVENT_KINDS = (FAULT, CLEAR, TRIP_BRANCH, TRIP_MACHINE, TRIP_LOAD)


class SimulationError(RuntimeError):
    pass


class DivergenceError(SimulationError):
    def __init__(self, time: float, machines: Sequence[str] = ()):
        self.time = time
        self.machines = tuple(machines)
        super().__init__(f"simulation diverged at t={time:.6f} s (machines {', '.join(self.machines)})")


@dataclass(frozen=True)
class MachineState:
    delta: np.ndarray
    omega: np.ndarray


@dataclass(frozen=True)
class Event:
    time: float
    kind: str
    target: str | int
    position: float = 0.5
    open_branch: bool = True
    source: str = "schedule"

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")
        if not self.time >= 0:
            raise ValueError("event time must be >= 0")
        if not 0.0 <= self.position <= 1.0:
            raise ValueError("fault position must lie in [0, 1]")


def fault(time, branch, position=0.5) -> Event:
    return Event(time, FAULT, branch, position=position)


def clear_fault(time, branch, open_branch=True) -> Event:
    return Event(time, CLEAR, branch, open_branch=open_branch)


def trip_branch(time, branch, source="schedule") -> Event:
    return Event(time, TRIP_BRANCH, branch, source=source)


def trip_machine(time, machine, source="schedule") -> Event:
    return Event(time, TRIP_MACHINE, machine, source=source)


def trip_load(time, bus, source="schedule") -> Event:
    return Event(time, TRIP_LOAD, int(bus), source=source)


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1e-3
    t_end: float = 5.0
    record_stride: int = 10
    monitor_stride: int = 10
    ws: float = WS
    on_divergence: str = "raise"   # or "isolate": drop the diverged island and continue

    def __post_init__(self):
        if not self.dt > 0 or not self.t_end > 0:
            raise ValueError("dt and t_end must be positive")
        if self.record_stride < 1 or self.monitor_stride < 1:
            raise ValueError("strides must be >= 1")
        if self.on_divergence not in ("raise", "isolate"):
            raise ValueError("on_divergence must be 'raise' or 'isolate'")


# ---------------------------------------------------------------------------
# topology

@dataclass(frozen=True)
class Topology:
    open_branches: frozenset = frozenset()
    faults: tuple = ()                      # ((branch_id, position), ...)
    tripped_machines: frozenset = frozenset()
    tripped_loads: frozenset = frozenset()

    def fault_position(self, branch_id) -> float | None:
        for b, p in self.faults:
            if b == branch_id:
                return p
        return None


def apply_event(case: NetworkCase, topo: Topology, ev: Event) -> Topology | None:
    """Return the topology after ``ev``; None when a relay event is a no-op.

    Scheduled events that reference out-of-service equipment raise
    SimulationError; relay-initiated duplicates are ignored.
    """
    relay = ev.source != "schedule"

    def reject(msg):
        if relay:
            return None
        raise SimulationError(f"t={ev.time}: {msg}")

    if ev.kind in (FAULT, CLEAR, TRIP_BRANCH):
        try:
            br = case.branch(ev.target)
        except KeyError:
            raise SimulationError(f"unknown branch {ev.target!r}") from None
        is_open = not br.in_service or br.id in topo.open_branches
        pos = topo.fault_position(br.id)
        if ev.kind == FAULT:
            if is_open:
                return reject(f"fault on out-of-service branch {br.id}")
            if pos is not None:
                return reject(f"branch {br.id} is already faulted")
            return replace(topo, faults=topo.faults + ((br.id, ev.position),))
        if ev.kind == CLEAR:
            if pos is None:
                return reject(f"no fault to clear on branch {br.id}")
            faults = tuple(f for f in topo.faults if f[0] != br.id)
            opened = topo.open_branches | {br.id} if ev.open_branch else topo.open_branches
            return replace(topo, faults=faults, open_branches=opened)
        if is_open:
            return reject(f"branch {br.id} is already out of service")
        faults = tuple(f for f in topo.faults if f[0] != br.id)
        return replace(topo, faults=faults, open_branches=topo.open_branches | {br.id})
    if ev.kind == TRIP_MACHINE:
        if ev.target not in case.machine_ids:
            raise SimulationError(f"unknown machine {ev.target!r}")
        if ev.target in topo.tripped_machines:
            return reject(f"machine {ev.target} is already tripped")
        return replace(topo, tripped_machines=topo.tripped_machines | {ev.target})
    bus = int(ev.target)
    if bus not in case.bus_index:
        raise SimulationError(f"unknown bus {ev.target!r}")
    if bus in topo.tripped_loads:
        return reject(f"load at bus {bus} is already tripped")
    return replace(topo, tripped_loads=topo.tripped_loads | {bus})


@dataclass
class Island:
    positions: np.ndarray          # indices into the epoch's active machine list
    machines: tuple[int, ...]      # indices into case.machines
    buses: frozenset
    g: np.ndarray = field(repr=False)
    b: np.ndarray = field(repr=False)


@dataclass
class Epoch:
    """One constant-topology interval of a run."""

    topology: Topology
    t_start: float
    reduced: ReducedNetwork
    active: np.ndarray                 # case machine indices, reduced-network order
    islands: list[Island]
    node_ids: tuple
    keep: np.ndarray = field(repr=False)
    elim: np.ndarray = field(repr=False)
    recon: np.ndarray = field(repr=False)
    meas_ids: tuple = ()
    meas: dict = field(default_factory=dict, repr=False)
    deenergized_buses: frozenset = frozenset()
    t_end: float | None = None

    def node_voltages(self, e_active: np.ndarray) -> np.ndarray:
        v = np.zeros(len(self.node_ids), dtype=complex)
        v[self.keep] = e_active
        if self.elim.size:
            v[self.elim] = self.recon @ e_active
        return v


def _components(n: int, edges: Iterable[tuple[int, int]]) -> list[list[int]]:
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for a, b in edges:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    comps: dict[int, list[int]] = {}
    for k in range(n):
        comps.setdefault(find(k), []).append(k)
    return [comps[r] for r in sorted(comps)]


def build_epoch(case: NetworkCase, topo: Topology, load_y: np.ndarray, t_start: float = 0.0) -> Epoch:
    bus_ids = case.bus_ids
    bidx = case.bus_index
    node_ids: list = list(bus_ids)
    fault_node: dict = {}
    for br_id, pos in topo.faults:
        if 0.0 < pos < 1.0:
            fault_node[br_id] = len(node_ids)
            node_ids.append(("F", br_id))
    active = [k for k, m in enumerate(case.machines) if m.id not in topo.tripped_machines]
    first_internal = len(node_ids)
    node_ids.extend(("E", case.machines[k].id) for k in active)
    n = len(node_ids)
    y = np.zeros((n, n), dtype=complex)
    y_fault = 1.0 / FAULT_IMPEDANCE
    edges = []
    meas_ids, fn, fnb, yff, yft, tn, tnb, ytt, ytf = [], [], [], [], [], [], [], [], []
    for br in case.branches:
        if not br.in_service or br.id in topo.open_branches:
            continue
        f, t = bidx[br.from_bus], bidx[br.to_bus]
        pos = topo.fault_position(br.id)
        if br.id in fault_node:
            F = fault_node[br.id]
            s1 = replace(br, r=br.r * pos, x=br.x * pos, b_charging=br.b_charging * pos)
            s2 = replace(br, r=br.r * (1 - pos), x=br.x * (1 - pos),
                         b_charging=br.b_charging * (1 - pos), tap=1.0)
            p1, p2 = branch_stamp(s1), branch_stamp(s2)
            stamp(y, f, F, p1)
            stamp(y, F, t, p2)
            y[F, F] += y_fault
            edges += [(f, F), (F, t)]
            row = (f, F, p1[0, 0], p1[0, 1], t, F, p2[1, 1], p2[1, 0])
        else:
            p = branch_stamp(br)
            stamp(y, f, t, p)
            edges.append((f, t))
            if pos == 0.0:
                y[f, f] += y_fault
            elif pos == 1.0:
                y[t, t] += y_fault
            row = (f, t, p[0, 0], p[0, 1], t, f, p[1, 1], p[1, 0])
        meas_ids.append(br.id)
        for lst, val in zip((fn, fnb, yff, yft, tn, tnb, ytt, ytf), row):
            lst.append(val)
    for k, bus in enumerate(case.buses):
        y[k, k] += complex(bus.shunt_g, bus.shunt_b)
        if bus.id not in topo.tripped_loads:
            y[k, k] += load_y[k]
    xdp = case.xdp_sys()
    for pos, k in enumerate(active):
        ym = 1.0 / (1j * xdp[k])
        i, j = bidx[case.machines[k].bus], first_internal + pos
        y[i, i] += ym
        y[j, j] += ym
        y[i, j] -= ym
        y[j, i] -= ym
        edges.append((i, j))

    comps = _components(n, edges)
    energized = [c for c in comps if any(v >= first_internal for v in c)]
    live = set().union(*energized) if energized else set()
    keep = np.arange(first_internal, n)
    elim = np.array(sorted(v for v in live if v < first_internal), dtype=int)
    y_red, recon = schur_parts(y, keep, elim)
    active_ids = tuple(case.machines[k].id for k in active)
    islands = []
    for comp in energized:
        posns = np.array(sorted(v - first_internal for v in comp if v >= first_internal), dtype=int)
        sub = y_red[np.ix_(posns, posns)]
        islands.append(Island(
            positions=posns,
            machines=tuple(active[p] for p in posns),
            buses=frozenset(bus_ids[v] for v in comp if v < len(bus_ids)),
            g=np.ascontiguousarray(sub.real), b=np.ascontiguousarray(sub.imag),
        ))
    dead = frozenset(bus_ids[v] for v in range(len(bus_ids)) if v not in live)
    meas = {k: np.asarray(v) for k, v in zip(
        ("fn", "fnb", "yff", "yft", "tn", "tnb", "ytt", "ytf"), (fn, fnb, yff, yft, tn, tnb, ytt, ytf))}
    return Epoch(topology=topo, t_start=t_start, reduced=ReducedNetwork(active_ids, y_red),
                 active=np.array(active, dtype=int), islands=islands, node_ids=tuple(node_ids),
                 keep=keep, elim=elim, recon=recon, meas_ids=tuple(meas_ids), meas=meas,
                 deenergized_buses=dead)


# ---------------------------------------------------------------------------
# per-tick network view for protection and monitoring hooks

class TickView:
    def __init__(self, time: float, epoch: Epoch, delta: np.ndarray, omega: np.ndarray,
                 emf: np.ndarray, case: NetworkCase):
        self.time = time
        self.epoch = epoch
        self.delta = delta
        self.omega = omega
        self.emf = emf
        self.case = case

    @property
    def active(self) -> np.ndarray:
        return self.epoch.active

    @cached_property
    def node_voltages(self) -> np.ndarray:
        a = self.epoch.active
        return self.epoch.node_voltages(self.emf[a] * np.exp(1j * self.delta[a]))

    def bus_voltage(self, bus_id: int) -> complex:
        return complex(self.node_voltages[self.case.bus_index[bus_id]])

    @cached_property
    def branch_ends(self) -> dict:
        """branch id -> (v_from, i_from, v_to, i_to); currents flow from the bus into the branch."""
        m = self.epoch.meas
        if not self.epoch.meas_ids:
            return {}
        v = self.node_voltages
        vf, vt = v[m["fn"]], v[m["tn"]]
        i_f = m["yff"] * vf + m["yft"] * v[m["fnb"]]
        i_t = m["ytt"] * vt + m["ytf"] * v[m["tnb"]]
        return {bid: (vf[k], i_f[k], vt[k], i_t[k]) for k, bid in enumerate(self.epoch.meas_ids)}


class Hook(Protocol):
    def on_tick(self, view: TickView) -> list[Event]: ...


# ---------------------------------------------------------------------------
# integration

def derivatives(delta, omega, emf, red: ReducedNetwork, p_mech, inertia, damping, ws=WS):
    """Swing-equation right-hand side: (d delta/dt, d omega/dt)."""
    pe = kernels.electrical_power(red.g, red.b, emf, delta)
    return ws * omega, (p_mech - pe - damping * omega) / (2.0 * inertia)


def electrical_power(red: ReducedNetwork, emf, delta) -> np.ndarray:
    emf = np.asarray(emf, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if emf.shape != delta.shape or emf.shape[0] != red.y_red.shape[0]:
        raise ValueError("dimension mismatch")
    return kernels.electrical_power(np.ascontiguousarray(red.g), np.ascontiguousarray(red.b), emf, delta)


def step(state: MachineState, dt: float, red: ReducedNetwork, init: DynamicInit, ws: float = WS,
         time: float = 0.0) -> MachineState:
    """One RK4 step of the swing equations over every machine of ``red``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    d = np.array(state.delta, dtype=float)
    w = np.array(state.omega, dtype=float)
    bad = kernels.rk4_steps(d, w, init.emf, np.ascontiguousarray(red.g), np.ascontiguousarray(red.b),
                            init.p_mech, 2.0 * init.inertia, init.damping, ws, dt, 1)
    if bad >= 0:
        raise DivergenceError(time + dt, red.machine_ids)
    return MachineState(d, w)


@dataclass
class SystemTrajectory:
    machine_ids: tuple[str, ...]
    times: np.ndarray
    delta: np.ndarray        # (samples, machines); NaN once a machine is out of service
    omega: np.ndarray
    event_log: list[Event]
    epochs: list[Epoch]
    inertia: np.ndarray

    def state(self, i: int) -> MachineState:
        return MachineState(self.delta[i], self.omega[i])

    @property
    def topology_epochs(self) -> list[tuple[tuple[float, float], ReducedNetwork]]:
        return [((e.t_start, e.t_end), e.reduced) for e in self.epochs]

    @property
    def final_epoch(self) -> Epoch:
        return self.epochs[-1]


def _step_of(t: float, dt: float) -> int:
    return int(round(t / dt))


def simulate(case: NetworkCase, init: DynamicInit, events: Sequence[Event], cfg: SimConfig,
             relays: Sequence[Hook] = (), state0: MachineState | None = None) -> SystemTrajectory:
    """Integrate the swing equations, applying ``events`` and hook-injected trips.

    Hooks run every ``cfg.monitor_stride`` steps (including t=0) after the
    scheduled events of that instant; events they return take effect
    immediately. Samples are recorded every ``cfg.record_stride`` steps.
    """
    dt = cfg.dt
    n_end = _step_of(cfg.t_end, dt)
    m = len(case.machines)
    delta = np.array(init.delta0 if state0 is None else state0.delta, dtype=float)
    omega = np.zeros(m) if state0 is None else np.array(state0.omega, dtype=float)
    emf = np.asarray(init.emf, dtype=float)
    inertia2 = 2.0 * np.asarray(init.inertia, dtype=float)
    damping = np.asarray(init.damping, dtype=float)
    p_mech = np.asarray(init.p_mech, dtype=float)
    load_y = load_admittances(case, init.bus_voltages)

    queue = sorted(events, key=lambda e: e.time)
    for ev in queue:
        if ev.time > cfg.t_end:
            raise SimulationError(f"event at t={ev.time} lies beyond t_end={cfg.t_end}")
    by_step: dict[int, list[Event]] = {}
    for ev in queue:
        by_step.setdefault(_step_of(ev.time, dt), []).append(ev)
    sched_steps = sorted(by_step)

    topo = Topology()
    epoch = build_epoch(case, topo, load_y, 0.0)
    epochs = [epoch]
    log: list[Event] = []
    diverged: set[int] = set()
    times, rec_d, rec_w = [], [], []

    def t_of(n):
        return round(n * dt, 10)

    def change(ev: Event, n: int):
        nonlocal topo, epoch
        ev = replace(ev, time=t_of(n)) if ev.source != "schedule" else ev
        new = apply_event(case, topo, ev)
        if new is None:
            return
        log.append(ev)
        topo = new
        epoch.t_end = t_of(n)
        epoch = build_epoch(case, topo, load_y, t_of(n))
        epochs.append(epoch)

    def in_service_mask():
        mask = np.zeros(m, dtype=bool)
        mask[epoch.active] = True
        return mask

    def record(n):
        mask = in_service_mask()
        times.append(t_of(n))
        rec_d.append(np.where(mask, delta, np.nan))
        rec_w.append(np.where(mask, omega, np.nan))

    def visit(n):
        for ev in by_step.get(n, ()):
            change(ev, n)
        if n % cfg.monitor_stride == 0 and relays:
            view = TickView(t_of(n), epoch, delta, omega, emf, case)
            injected = []
            for hook in relays:
                injected.extend(hook.on_tick(view) or ())
            for ev in injected:
                change(ev, n)
        if n % cfg.record_stride == 0 or n == n_end:
            record(n)

    def integrate(n0, k):
        newly = []
        for isl in epoch.islands:
            idx = np.asarray(isl.machines, dtype=int)
            d = np.ascontiguousarray(delta[idx])
            w = np.ascontiguousarray(omega[idx])
            bad = kernels.rk4_steps(d, w, emf[idx], isl.g, isl.b, p_mech[idx], inertia2[idx],
                                    damping[idx], cfg.ws, dt, k)
            delta[idx] = d
            omega[idx] = w
            if bad >= 0:
                ids = [case.machines[i].id for i in idx]
                if cfg.on_divergence == "raise":
                    raise DivergenceError(t_of(n0 + bad + 1), ids)
                newly.extend(int(i) for i in idx)
        # a diverged island is dropped; the others were integrated independently
        for i in newly:
            diverged.add(i)
            change(Event(t_of(n0 + k), TRIP_MACHINE, case.machines[i].id, source="divergence"), n0 + k)
        if newly:
            delta[newly] = np.nan
            omega[newly] = np.nan

    n = 0
    visit(0)
    while n < n_end:
        nxt = n_end
        for s in sched_steps:
            if s > n:
                nxt = min(nxt, s)
                break
        nxt = min(nxt, (n // cfg.monitor_stride + 1) * cfg.monitor_stride,
                  (n // cfg.record_stride + 1) * cfg.record_stride)
        integrate(n, nxt - n)
        n = nxt
        visit(n)
    epoch.t_end = t_of(n_end)
    return SystemTrajectory(
        machine_ids=tuple(case.machine_ids),
        times=np.array(times),
        delta=np.array(rec_d).reshape(len(times), m),
        omega=np.array(rec_w).reshape(len(times), m),
        event_log=log,
        epochs=epochs,
        inertia=np.asarray(init.inertia, dtype=float),
    )
