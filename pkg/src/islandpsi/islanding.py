"""Controlled islanding: boundary derivation, R-Rdot arming and load accounting."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import Bounds, LinearConstraint, milp
from scipy.sparse import coo_matrix

from .coherency import GeneratorPartition
from .dynamics import Event, SimConfig, SystemTrajectory, TickView, _components, simulate
from .grid import NetworkCase, branch_stamp
from .powerflow import DynamicInit, PowerFlowError, solve_power_flow
from .protection import RRdotProtection, RRdotRelaySetting, rrdot_settings_from_base

SPEED_BAND = 0.05
SYNC_LIMIT = np.pi


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class IslandingPlan:
    boundary_branches: frozenset
    regions: Mapping[int, int] = field(default_factory=dict, compare=False)   # bus -> group index
    arm_time: float | None = None

    def armed_at(self, t: float) -> "IslandingPlan":
        return IslandingPlan(self.boundary_branches, self.regions, t)


def _branch_flows(case: NetworkCase) -> dict[str, float]:
    """|P| at the sending end of every in-service branch in the base power flow."""
    try:
        pf = solve_power_flow(case)
    except PowerFlowError:
        return {}
    idx = case.bus_index
    out = {}
    for br in case.branches:
        if not br.in_service:
            continue
        vf, vt = pf.voltages[idx[br.from_bus]], pf.voltages[idx[br.to_bus]]
        y = branch_stamp(br)
        i_f = y[0, 0] * vf + y[0, 1] * vt
        out[br.id] = abs((vf * np.conj(i_f)).real)
    return out


def derive_plan(partition: GeneratorPartition, case: NetworkCase,
                flows: Mapping[str, float] | None = None) -> IslandingPlan:
    """Assign every bus to a group region and return the inter-region cutset.

    Terminal buses of each group's machines are pinned to that group; the
    remaining buses are placed so that the number of cut branches is
    minimal, with ties settled by the smallest total base-case flow across
    the cut. This is a multiway cut, solved as a small MILP.
    """
    if partition.u < 2:
        raise PlanError("a plan needs at least two coherent groups")
    mids = set(case.machine_ids)
    missing = partition.machine_ids - mids
    if missing:
        raise PlanError(f"partition names unknown machines: {sorted(missing)}")
    bus_ids = case.bus_ids
    bidx = case.bus_index
    nb, u = len(bus_ids), partition.u
    pinned: dict[int, int] = {}
    for g, members in enumerate(partition.groups):
        for mid in members:
            b = bidx[case.machine(mid).bus]
            if pinned.get(b, g) != g:
                raise PlanError(f"bus {bus_ids[b]} hosts machines of different groups")
            pinned[b] = g
    branches = [br for br in case.branches if br.in_service]
    edges = [(bidx[br.from_bus], bidx[br.to_bus]) for br in branches]

    # every bus must reach some pinned bus
    reach = set()
    for comp in _components(nb, edges):
        if any(v in pinned for v in comp):
            reach.update(comp)
    lost = [bus_ids[v] for v in range(nb) if v not in reach]
    if lost:
        raise PlanError(f"buses unreachable from any coherent group: {lost}")

    flows = _branch_flows(case) if flows is None else flows
    total = sum(flows.get(br.id, 0.0) for br in branches)
    ne = len(branches)
    # variables: x[b, g] (nb*u binaries) then y[e] (ne cut indicators)
    nx = nb * u
    cost = np.concatenate([np.zeros(nx), [1.0 + flows.get(br.id, 0.0) / (total + 1.0) for br in branches]])
    rows, cols, vals, lo, hi = [], [], [], [], []
    r = 0
    for b in range(nb):
        for g in range(u):
            rows.append(r); cols.append(b * u + g); vals.append(1.0)
        lo.append(1.0); hi.append(1.0); r += 1
    for e, (i, j) in enumerate(edges):
        for g in range(u):
            for a, c in ((i, j), (j, i)):
                # y_e >= x[a,g] - x[c,g]
                rows += [r, r, r]; cols += [nx + e, a * u + g, c * u + g]; vals += [1.0, -1.0, 1.0]
                lo.append(0.0); hi.append(np.inf); r += 1
    a_mat = coo_matrix((vals, (rows, cols)), shape=(r, nx + ne)).tocsr()
    lb = np.zeros(nx + ne)
    ub = np.ones(nx + ne)
    for b, g in pinned.items():
        lb[b * u + g] = 1.0
    res = milp(cost, constraints=LinearConstraint(a_mat, lo, hi), integrality=np.ones(nx + ne),
               bounds=Bounds(lb, ub))
    if not res.success:
        raise PlanError(f"region assignment failed: {res.message}")
    x = np.round(res.x[:nx]).reshape(nb, u)
    region = {bus_ids[b]: int(np.argmax(x[b])) for b in range(nb)}
    cut = frozenset(br.id for br in branches if region[br.from_bus] != region[br.to_bus])
    return IslandingPlan(cut, region)


# ---------------------------------------------------------------------------
# execution

class IslandingExecutor:
    """Hook that arms R-Rdot relays on the plan's boundary when told to.

    Relay settings are taken from the t = 0 network state unless supplied.
    Resistance histories are kept from the start so the first armed tick
    already has a rate estimate.
    """

    def __init__(self, plan: IslandingPlan, settings: Mapping[str, RRdotRelaySetting] | None = None,
                 t_slope: float = 0.05, fraction: float = 0.5):
        self.plan = plan
        self._given = dict(settings) if settings is not None else None
        self.t_slope = t_slope
        self.fraction = fraction
        self.relays: RRdotProtection | None = None
        self.arm_time: float | None = None
        self.armed_branches: tuple[str, ...] = ()
        self._pending: float | None = None

    def request_arm(self, t: float) -> None:
        if self._pending is None and self.arm_time is None:
            self._pending = t

    def on_tick(self, view: TickView) -> list[Event]:
        if self.relays is None:
            settings = self._given if self._given is not None else rrdot_settings_from_base(
                view, sorted(self.plan.boundary_branches), self.t_slope, self.fraction)
            self.relays = RRdotProtection(dict(settings))
        if self._pending is not None and view.time >= self._pending - 1e-9:
            live = set(view.branch_ends)
            self.armed_branches = tuple(sorted(b for b in self.plan.boundary_branches if b in live))
            self.relays.arm(self.armed_branches)
            self.arm_time = view.time
            self._pending = None
        return self.relays.on_tick(view)

    @property
    def trips(self) -> list[tuple[float, str]]:
        return [] if self.relays is None else list(self.relays.trips)


class _ScheduledArm:
    def __init__(self, executor: IslandingExecutor, t: float):
        executor.request_arm(t)
        self.executor = executor

    def on_tick(self, view):
        return self.executor.on_tick(view)


def execute_islanding(case: NetworkCase, init: DynamicInit, events: Sequence[Event], cfg: SimConfig,
                      plan: IslandingPlan, arm_time: float,
                      settings: Mapping[str, RRdotRelaySetting] | None = None,
                      relays: Sequence = ()) -> tuple[SystemTrajectory, "RunOutcome", IslandingExecutor]:
    """Replay a run with the boundary R-Rdot relays armed at ``arm_time``.

    The run is deterministic, so the replay matches the original trajectory
    up to the arming instant. Diverging islands are isolated, not fatal.
    """
    ex = IslandingExecutor(plan, settings)
    cfg = SimConfig(cfg.dt, cfg.t_end, cfg.record_stride, cfg.monitor_stride, cfg.ws, "isolate")
    traj = simulate(case, init, events, cfg, relays=[*relays, _ScheduledArm(ex, arm_time)])
    return traj, assess_outcome(case, traj), ex


# ---------------------------------------------------------------------------
# outcome accounting

@dataclass(frozen=True)
class IslandOutcome:
    island_id: int
    machines: tuple[str, ...]
    buses: tuple[int, ...]
    load: float            # per-unit load connected in the island
    survived: bool

    @property
    def served(self) -> float:
        return self.load if self.survived else 0.0


@dataclass(frozen=True)
class RunOutcome:
    case_name: str
    total_load: float
    islands: tuple[IslandOutcome, ...]
    deenergized: float
    tripped: float         # load disconnected by load-trip events

    @property
    def served(self) -> float:
        return float(sum(i.served for i in self.islands))

    @property
    def lost(self) -> float:
        return float(sum(i.load for i in self.islands if not i.survived)) + self.tripped


def _island_survives(traj: SystemTrajectory, idx: np.ndarray, band: float) -> bool:
    d = traj.delta[-1, idx]
    w = traj.omega[-1, idx]
    if not (np.all(np.isfinite(d)) and np.all(np.isfinite(w))):
        return False
    h = traj.inertia[idx]
    coi_w = float(h @ w / h.sum())
    coi_d = float(h @ d / h.sum())
    return abs(coi_w) <= band and bool(np.all(np.abs(d - coi_d) <= SYNC_LIMIT))


def assess_outcome(case: NetworkCase, traj: SystemTrajectory, band: float = SPEED_BAND) -> RunOutcome:
    """Served, lost and de-energized load at the end of a run.

    An island survives when its inertia-weighted mean speed deviation is
    within ``band`` and none of its machines sits more than 180 degrees from
    the island's mean angle.
    """
    ep = traj.final_epoch
    topo = ep.topology
    loads = {b.id: b.load_p for b in case.buses}
    tripped = float(sum(loads[b] for b in topo.tripped_loads))
    live = lambda b: 0.0 if b in topo.tripped_loads else loads[b]
    islands = []
    for k, isl in enumerate(sorted(ep.islands, key=lambda i: min(i.machines))):
        idx = np.array(sorted(isl.machines), dtype=int)
        islands.append(IslandOutcome(
            island_id=k,
            machines=tuple(case.machines[i].id for i in idx),
            buses=tuple(sorted(isl.buses)),
            load=float(sum(live(b) for b in isl.buses)),
            survived=_island_survives(traj, idx, band),
        ))
    dead = float(sum(live(b) for b in ep.deenergized_buses))
    return RunOutcome(case.name, float(sum(loads.values())), tuple(islands), dead, tripped)


@dataclass(frozen=True)
class LoadComparison:
    total_load: float
    served_with: float
    served_without: float
    lost_with: float
    lost_without: float

    @property
    def saving(self) -> float:
        return self.served_with - self.served_without

    @property
    def saving_fraction(self) -> float:
        return self.saving / self.total_load if self.total_load else 0.0


def compare_load_loss(with_: RunOutcome, without: RunOutcome) -> LoadComparison:
    if with_.case_name != without.case_name or not np.isclose(with_.total_load, without.total_load, rtol=0, atol=1e-12):
        raise ValueError("outcomes come from different cases")
    return LoadComparison(with_.total_load, with_.served, without.served,
                          with_.lost + with_.deenergized, without.lost + without.deenergized)


OUTCOME_COLUMNS = ("island_id", "machines", "load_served_mw", "survived")


def write_outcome_csv(outcome: RunOutcome, path: str | Path | None = None, base_mva: float = 100.0) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(OUTCOME_COLUMNS)
    for isl in outcome.islands:
        w.writerow([isl.island_id, " ".join(isl.machines), repr(float(isl.served * base_mva)), int(isl.survived)])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text
