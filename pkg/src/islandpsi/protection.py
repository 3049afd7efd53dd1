"""Distance and R-Rdot relay models plus the post-hoc stability labeler."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .coherency import GeneratorPartition
from .dynamics import Event, SystemTrajectory, TickView, trip_branch
from .grid import NetworkCase

OUT_OF_REACH = complex(np.inf, np.inf)

STABLE = "stable_low_swing"
MACHINE_INSTABILITY = "machine_instability"
ISLAND_FORMATION = "island_formation"
LABELS = (STABLE, MACHINE_INSTABILITY, ISLAND_FORMATION)

POLE_SLIP = np.pi
INTRA_SPREAD = np.pi / 2


@dataclass(frozen=True)
class DistanceRelaySetting:
    branch: str
    zone1_reach: float = 0.8
    zone2_reach: float = 1.2
    zone2_delay: float = 0.3

    def __post_init__(self):
        if not 0 < self.zone1_reach < self.zone2_reach:
            raise ValueError("need 0 < zone1_reach < zone2_reach")


@dataclass(frozen=True)
class RRdotRelaySetting:
    branch: str
    t_slope: float = 0.05
    u_threshold: float = 0.0
    armed: bool = False
    end: str = "from"

    def __post_init__(self):
        if not self.t_slope > 0:
            raise ValueError("t_slope must be positive")


@dataclass(frozen=True)
class StabilityLabel:
    value: str
    separated_groups: tuple = ()     # (group indices on one side, the other side)
    time: float | None = None        # first instant the criterion held

    def __post_init__(self):
        if self.value not in LABELS:
            raise ValueError(f"unknown label {self.value!r}")
        if self.value == ISLAND_FORMATION and len(self.separated_groups) != 2:
            raise ValueError("island_formation needs a two-sided partition witness")


def apparent_impedance(v_end: complex, i_line: complex) -> complex:
    """Z = V / I seen at a line end; out of reach when |I| <= 1e-9."""
    if abs(i_line) <= 1e-9:
        return OUT_OF_REACH
    return v_end / i_line


def in_mho(z: complex, reach: complex) -> bool:
    """Mho characteristic: circle through the origin with diameter ``reach``."""
    if not np.isfinite(z.real):
        return False
    return abs(z - reach / 2) <= abs(reach) / 2


# ---------------------------------------------------------------------------
# distance protection

@dataclass
class DistanceProtection:
    """Two-zone mho distance relays at both ends of each protected branch.

    Branches carrying an applied fault log their pickups but are left to the
    scheduled clearing event, which stands in for the primary protection of
    that line.
    """

    case: NetworkCase
    settings: Mapping[str, DistanceRelaySetting]
    pickups: list = field(default_factory=list)
    _z2_since: dict = field(default_factory=dict)

    def zones(self, z: complex, branch_id: str) -> tuple[bool, bool]:
        s = self.settings[branch_id]
        zl = self.case.branch(branch_id).z
        return in_mho(z, s.zone1_reach * zl), in_mho(z, s.zone2_reach * zl)

    def scan(self, view: TickView) -> list[Event]:
        return distance_scan(view, self)

    def on_tick(self, view: TickView) -> list[Event]:
        return self.scan(view)


def default_distance_settings(case: NetworkCase, exclude: Sequence[str] = ()) -> dict[str, DistanceRelaySetting]:
    """Relays on every branch not touching a machine terminal bus (step-up units excluded)."""
    gen_buses = {m.bus for m in case.machines}
    return {br.id: DistanceRelaySetting(br.id) for br in case.branches
            if br.from_bus not in gen_buses and br.to_bus not in gen_buses and br.id not in exclude}


def distance_scan(view: TickView, relays: DistanceProtection) -> list[Event]:
    trips = []
    faulted = {b for b, _ in view.epoch.topology.faults}
    ends = view.branch_ends
    t = view.time
    for bid in relays.settings:
        if bid not in ends:
            for side in ("from", "to"):
                relays._z2_since.pop((bid, side), None)
            continue
        vf, i_f, vt, i_t = ends[bid]
        if bid in faulted:
            # pickups are logged, clearing is left to the scheduled event
            for side, (v, i) in (("from", (vf, i_f)), ("to", (vt, i_t))):
                z1, _ = relays.zones(apparent_impedance(v, i), bid)
                if z1 and (bid, side) not in relays._z2_since:
                    relays.pickups.append((t, bid, side, 1))
                    relays._z2_since[(bid, side)] = t
            continue
        trip = False
        for side, (v, i) in (("from", (vf, i_f)), ("to", (vt, i_t))):
            z1, z2 = relays.zones(apparent_impedance(v, i), bid)
            key = (bid, side)
            if z1:
                relays.pickups.append((t, bid, side, 1))
                trip = True
            if z2:
                since = relays._z2_since.setdefault(key, t)
                if since == t:
                    relays.pickups.append((t, bid, side, 2))
                if t - since >= relays.settings[bid].zone2_delay - 1e-9:
                    trip = True
            else:
                relays._z2_since.pop(key, None)
        if trip:
            trips.append(trip_branch(t, bid, source="distance"))
            for side in ("from", "to"):
                relays._z2_since.pop((bid, side), None)
    return trips


# ---------------------------------------------------------------------------
# R-Rdot out-of-step relays

def rrdot_evaluate(times: Sequence[float], r_series: Sequence[float], setting: RRdotRelaySetting,
                   armed_from: float | None = None) -> float | None:
    """First sample time with U = R + T dR/dt below threshold, or None.

    dR/dt is the two-point backward difference, so the first sample is never
    evaluated. A disarmed relay never trips; ``armed_from`` restricts
    evaluation to samples at or after the arming instant.
    """
    if not setting.armed:
        return None
    t = np.asarray(times, dtype=float)
    r = np.asarray(r_series, dtype=float)
    for k in range(1, len(t)):
        if armed_from is not None and t[k] < armed_from - 1e-12:
            continue
        u = r[k] + setting.t_slope * (r[k] - r[k - 1]) / (t[k] - t[k - 1])
        if u < setting.u_threshold:
            return float(t[k])
    return None


@dataclass
class RRdotProtection:
    """Online R-Rdot relays; resistance is sampled every tick, armed or not."""

    settings: dict[str, RRdotRelaySetting]
    history: dict = field(default_factory=dict)
    trips: list = field(default_factory=list)

    def arm(self, branches=None):
        for bid, s in list(self.settings.items()):
            if branches is None or bid in branches:
                self.settings[bid] = RRdotRelaySetting(s.branch, s.t_slope, s.u_threshold, True, s.end)

    @property
    def armed(self) -> bool:
        return any(s.armed for s in self.settings.values())

    def on_tick(self, view: TickView) -> list[Event]:
        out = []
        ends = view.branch_ends
        for bid, s in self.settings.items():
            if bid not in ends:
                continue
            vf, i_f, vt, i_t = ends[bid]
            v, i = (vf, i_f) if s.end == "from" else (vt, i_t)
            z = apparent_impedance(v, i)
            r = z.real if np.isfinite(z.real) else np.inf
            prev = self.history.get(bid)
            self.history[bid] = (view.time, r)
            if not s.armed or prev is None or not np.isfinite(r) or not np.isfinite(prev[1]):
                continue
            u = r + s.t_slope * (r - prev[1]) / (view.time - prev[0])
            if u < s.u_threshold:
                self.trips.append((view.time, bid))
                out.append(trip_branch(view.time, bid, source="rrdot"))
        return out


def rrdot_settings_from_base(view: TickView, branches: Sequence[str], t_slope: float = 0.05,
                             fraction: float = 0.5) -> dict[str, RRdotRelaySetting]:
    """Default settings: measure at the base-case sending end, threshold = fraction x base R."""
    out = {}
    ends = view.branch_ends
    for bid in branches:
        if bid not in ends:
            continue
        vf, i_f, vt, i_t = ends[bid]
        zf, zt = apparent_impedance(vf, i_f), apparent_impedance(vt, i_t)
        end, z = ("from", zf) if (vf * np.conj(i_f)).real >= 0 else ("to", zt)
        out[bid] = RRdotRelaySetting(bid, t_slope, fraction * abs(z.real), False, end)
    return out


# ---------------------------------------------------------------------------
# stability labeling

def label_stability(traj: SystemTrajectory, partition: GeneratorPartition,
                    inertia: np.ndarray | None = None) -> StabilityLabel:
    """Classify a run from its rotor angles.

    island_formation: at some sample the inertia-weighted mean angles of two
    coherent groups are more than 180 degrees apart while every group's
    internal angle spread is below 90 degrees. machine_instability: some
    machine departs more than 180 degrees from its own group mean. Otherwise
    stable_low_swing. Out-of-service machines (NaN samples) are ignored.
    """
    ids = list(traj.machine_ids)
    h = np.asarray(traj.inertia if inertia is None else inertia, dtype=float)
    groups = [np.array([ids.index(m) for m in g if m in ids], dtype=int) for g in partition.groups]
    groups = [g for g in groups if g.size]
    d = np.asarray(traj.delta, dtype=float)
    n = d.shape[0]
    coi = np.full((n, len(groups)), np.nan)
    spread = np.zeros((n, len(groups)))
    dev = np.zeros(n)
    for k, g in enumerate(groups):
        dg = d[:, g]
        valid = np.isfinite(dg)
        wts = np.where(valid, h[g], 0.0)
        tot = wts.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            coi[:, k] = np.where(tot > 0, np.nansum(dg * wts, axis=1) / np.where(tot > 0, tot, 1), np.nan)
            spread[:, k] = np.where(valid.any(axis=1),
                                    np.nanmax(np.where(valid, dg, -np.inf), axis=1)
                                    - np.nanmin(np.where(valid, dg, np.inf), axis=1), 0.0)
            off = np.abs(dg - coi[:, [k]])
        dev = np.maximum(dev, np.nanmax(np.where(valid, off, 0.0), axis=1))

    for i in range(n):
        c = coi[i]
        live = np.flatnonzero(np.isfinite(c))
        if live.size < 2:
            continue
        if c[live].max() - c[live].min() > POLE_SLIP and np.all(spread[i] < INTRA_SPREAD):
            order = live[np.argsort(c[live], kind="stable")]
            gaps = np.diff(c[order])
            cut = int(np.argmax(gaps)) + 1
            side_a = tuple(sorted(int(x) for x in order[cut:]))
            side_b = tuple(sorted(int(x) for x in order[:cut]))
            return StabilityLabel(ISLAND_FORMATION, (side_a, side_b), float(traj.times[i]))
    hit = np.flatnonzero(dev > POLE_SLIP)
    if hit.size:
        return StabilityLabel(MACHINE_INSTABILITY, (), float(traj.times[hit[0]]))
    return StabilityLabel(STABLE)
