"""Scenario batches, calibration, with/without-islanding comparison and CSV reports."""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .coherency import (GeneratorPartition, build_ksgm, cluster_coherent_groups, normalize_coherency,
                        reference_scale, sync_coefficients)
from .dynamics import Event, SimConfig, SimulationError, TickView, simulate
from .grid import DATA_DIR, NetworkCase
from .islanding import (IslandingExecutor, IslandingPlan, LoadComparison, RunOutcome, assess_outcome,
                        compare_load_loss, derive_plan, write_outcome_csv)
from .powerflow import init_classical, solve_power_flow
from .protection import (ISLAND_FORMATION, LABELS, DistanceProtection, StabilityLabel,
                         default_distance_settings, label_stability)
from .psi import (GrowthPercent, IslandingSignal, OnlineDetector, PsiSample, Thresholds, calibrate_thresholds,
                  fmt, growth_percent, peak_growth, psi_sample, read_psi_csv, write_psi_csv)

SCENARIO_DIR = DATA_DIR / "scenarios"


class ScenarioError(ValueError):
    pass


class ScenarioRunError(RuntimeError):
    """A simulation or case error, tagged with the scenario that raised it."""

    def __init__(self, scenario_id: str, cause: Exception):
        self.scenario_id = scenario_id
        self.cause = cause
        super().__init__(f"scenario {scenario_id}: {cause}")


# ---------------------------------------------------------------------------
# scenario specs

@dataclass(frozen=True)
class RelayOverrides:
    distance: bool = True
    exclude: tuple[str, ...] = ()
    zone1_reach: float = 0.8
    zone2_reach: float = 1.2
    zone2_delay: float = 0.3
    rrdot_t_slope: float = 0.05
    rrdot_fraction: float = 0.5


@dataclass(frozen=True)
class ScenarioSpec:
    id: str
    description: str = ""
    events: tuple[Event, ...] = ()
    t_end: float = 5.0
    relays: RelayOverrides = RelayOverrides()
    expected_label: str | None = None
    load_scale: float = 1.0
    damping: float | None = None
    group_count: int | None = None
    partition: GeneratorPartition | None = None

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(sorted(self.events, key=lambda e: e.time)))
        if self.expected_label is not None and self.expected_label not in LABELS:
            raise ScenarioError(f"unknown expected label {self.expected_label!r}")
        if not self.t_end > 0 or not self.load_scale > 0:
            raise ScenarioError("t_end and load_scale must be positive")


def _event_from(d: dict) -> Event:
    try:
        return Event(float(d["time"]), d["kind"], d["target"], float(d.get("position", 0.5)),
                     bool(d.get("open_branch", True)))
    except (KeyError, TypeError, ValueError) as err:
        raise ScenarioError(f"bad event {d!r}: {err}") from None


def scenario_from_dict(doc: dict) -> ScenarioSpec:
    try:
        relays = RelayOverrides(**{k: tuple(v) if k == "exclude" else v for k, v in doc.get("relays", {}).items()})
        part = doc.get("partition")
        return ScenarioSpec(
            id=str(doc["id"]),
            description=doc.get("description", ""),
            events=tuple(_event_from(e) for e in doc.get("events", ())),
            t_end=float(doc.get("t_end", 5.0)),
            relays=relays,
            expected_label=doc.get("expected_label"),
            load_scale=float(doc.get("load_scale", 1.0)),
            damping=None if doc.get("damping") is None else float(doc["damping"]),
            group_count=doc.get("group_count"),
            partition=None if part is None else GeneratorPartition(tuple(tuple(g) for g in part)),
        )
    except (KeyError, TypeError) as err:
        raise ScenarioError(f"bad scenario: {err}") from None


def scenario_to_dict(spec: ScenarioSpec) -> dict:
    doc = {
        "id": spec.id,
        "description": spec.description,
        "events": [{"time": e.time, "kind": e.kind, "target": e.target, "position": e.position,
                    "open_branch": e.open_branch} for e in spec.events],
        "t_end": spec.t_end,
        "relays": {**spec.relays.__dict__, "exclude": list(spec.relays.exclude)},
        "expected_label": spec.expected_label,
        "load_scale": spec.load_scale,
        "damping": spec.damping,
        "group_count": spec.group_count,
    }
    if spec.partition is not None:
        doc["partition"] = [list(g) for g in spec.partition.groups]
    return doc


def load_scenario(path: str | Path) -> ScenarioSpec:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise ScenarioError(f"cannot read scenario {path}: {err}") from None
    return scenario_from_dict(doc)


def bundled_scenario(name: str) -> ScenarioSpec:
    return load_scenario(SCENARIO_DIR / f"{name}.json")


def calibration_batch() -> list[ScenarioSpec]:
    """The 16 bundled calibration scenarios, in order."""
    return [bundled_scenario(f"s{k:02d}") for k in range(1, 17)]


# ---------------------------------------------------------------------------
# running

@dataclass(frozen=True)
class RunConfig:
    dt: float = 1e-3
    monitor_interval: float = 0.01
    record_interval: float = 0.01
    confirm: float = 0.04
    on_divergence: str = "isolate"

    def sim_config(self, t_end: float) -> SimConfig:
        mon = int(round(self.monitor_interval / self.dt))
        rec = int(round(self.record_interval / self.dt))
        if mon < 1 or rec < 1 or not math.isclose(mon * self.dt, self.monitor_interval, rel_tol=1e-9):
            raise ValueError("monitor interval must be a whole number of steps")
        return SimConfig(dt=self.dt, t_end=t_end, record_stride=rec, monitor_stride=mon,
                         on_divergence=self.on_divergence)


@dataclass
class RunReport:
    scenario_id: str
    machine_ids: tuple[str, ...]
    times: np.ndarray
    delta: np.ndarray
    omega: np.ndarray
    psi: list[PsiSample]
    growths: list[GrowthPercent]
    signal: IslandingSignal
    relay_log: list[tuple[float, str, str, str]]     # (time, kind, target, source)
    label: StabilityLabel
    partition: GeneratorPartition
    peak: GrowthPercent | None = None
    outcome: RunOutcome | None = None
    plan: IslandingPlan | None = None
    armed: tuple[str, ...] = ()


class PsiMonitor:
    """Per-tick coherency tracking: KsGM, the three indices and their growth.

    The baseline (reference scale and indices) is the t = 0 tick. With
    thresholds the online detector runs as well; on firing it asks the
    optional islanding executor to arm.
    """

    def __init__(self, partition: GeneratorPartition, thresholds: Thresholds | None = None,
                 confirm: float = 0.04, executor: IslandingExecutor | None = None):
        self.partition = partition
        self.detector = OnlineDetector(thresholds, confirm) if thresholds is not None else None
        self.executor = executor
        self.ref_scale: float | None = None
        self.baseline: PsiSample | None = None
        self.samples: list[PsiSample] = []
        self.growths: list[GrowthPercent] = []

    def on_tick(self, view: TickView) -> list[Event]:
        ep = view.epoch
        a = ep.active
        if not np.any(a):
            return []
        ks = sync_coefficients(ep.reduced, view.emf[a], view.delta[a], view.time)
        if self.ref_scale is None:
            self.ref_scale = reference_scale(ks)
        part = self.partition.restricted(ks.machine_ids)
        if part.u < 2:
            return []
        c = normalize_coherency(ks, self.ref_scale)
        s = psi_sample(build_ksgm(c, part, ks.machine_ids, baseline=self.baseline is None), view.time)
        if self.baseline is None:
            self.baseline = s
        g = growth_percent(s, self.baseline)
        self.samples.append(s)
        self.growths.append(g)
        if self.detector is not None and self.detector.push(g) and self.executor is not None:
            self.executor.request_arm(view.time)
        return []

    @property
    def signal(self) -> IslandingSignal:
        if self.detector is None:
            return IslandingSignal(False)
        if self.detector.fired:
            return self.detector.signal
        return IslandingSignal(False, None, tuple(self.detector.crossings))


@dataclass(frozen=True)
class PreparedCase:
    case: NetworkCase
    init: object
    partition: GeneratorPartition


def prepare(case: NetworkCase, spec: ScenarioSpec) -> PreparedCase:
    c = case.scaled(spec.load_scale) if spec.load_scale != 1.0 else case
    if spec.damping is not None:
        c = c.with_damping(spec.damping)
    init = init_classical(c, solve_power_flow(c))
    if spec.partition is not None:
        part = spec.partition
    else:
        ks0 = sync_coefficients(init.reduced, init.emf, init.delta0)
        part = cluster_coherent_groups(ks0, n_groups=spec.group_count)
    return PreparedCase(c, init, part)


def _distance(case: NetworkCase, spec: ScenarioSpec) -> list:
    r = spec.relays
    if not r.distance:
        return []
    settings = default_distance_settings(case, r.exclude)
    settings = {k: replace(s, zone1_reach=r.zone1_reach, zone2_reach=r.zone2_reach, zone2_delay=r.zone2_delay)
                for k, s in settings.items()}
    return [DistanceProtection(case, settings)]


def run_scenario(case: NetworkCase, spec: ScenarioSpec, cfg: RunConfig = RunConfig(),
                 thresholds: Thresholds | None = None, islanding: bool = False) -> RunReport:
    """Simulate one scenario with protection and PSI monitoring, then label it.

    With ``islanding`` (which needs thresholds) the boundary R-Rdot relays of
    the derived plan are armed when the signal fires.
    """
    try:
        prep = prepare(case, spec)
        plan = executor = None
        if islanding:
            if thresholds is None:
                raise ValueError("islanding needs thresholds")
            plan = derive_plan(prep.partition, prep.case)
            executor = IslandingExecutor(plan, t_slope=spec.relays.rrdot_t_slope,
                                         fraction=spec.relays.rrdot_fraction)
        monitor = PsiMonitor(prep.partition, thresholds, cfg.confirm, executor)
        hooks = [monitor, *_distance(prep.case, spec)]
        if executor is not None:
            hooks.append(executor)
        traj = simulate(prep.case, prep.init, spec.events, cfg.sim_config(spec.t_end), relays=hooks)
    except (SimulationError, ValueError, ArithmeticError) as err:
        raise ScenarioRunError(spec.id, err) from err
    signal = monitor.signal
    return RunReport(
        scenario_id=spec.id,
        machine_ids=traj.machine_ids,
        times=traj.times, delta=traj.delta, omega=traj.omega,
        psi=monitor.samples, growths=monitor.growths, signal=signal,
        relay_log=[(e.time, e.kind, str(e.target), e.source) for e in traj.event_log],
        label=label_stability(traj, prep.partition),
        partition=prep.partition,
        peak=peak_growth(monitor.growths) if monitor.growths else None,
        outcome=assess_outcome(prep.case, traj),
        plan=plan,
        armed=executor.armed_branches if executor is not None else (),
    )


# ---------------------------------------------------------------------------
# calibration

@dataclass(frozen=True)
class CalibrationRow:
    scenario_id: str
    label: str
    peak: GrowthPercent


@dataclass(frozen=True)
class CalibrationReport:
    rows: tuple[CalibrationRow, ...]
    thresholds: Thresholds


def _calibration_row(args) -> CalibrationRow:
    case, spec, cfg = args
    rep = run_scenario(case, spec, cfg)
    return CalibrationRow(spec.id, rep.label.value, rep.peak)


def run_calibration(case: NetworkCase, specs: Sequence[ScenarioSpec], cfg: RunConfig = RunConfig(),
                    workers: int = 1) -> CalibrationReport:
    """Run the batch, label each run and set thresholds from the island-forming rows."""
    jobs = [(case, s, cfg) for s in specs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_calibration_row, jobs))
    else:
        rows = [_calibration_row(j) for j in jobs]
    th = calibrate_thresholds([(r.label, r.peak) for r in rows])
    return CalibrationReport(tuple(rows), th)


CALIBRATION_COLUMNS = ("scenario", "label", "g_cgc", "g_igc", "g_dcgc")


def write_calibration_csv(report: CalibrationReport, path: str | Path | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CALIBRATION_COLUMNS)
    for r in report.rows:
        w.writerow([r.scenario_id, r.label, fmt(r.peak.g_cgc), fmt(r.peak.g_igc), fmt(r.peak.g_dcgc)])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def read_calibration_csv(path: str | Path) -> list[CalibrationRow]:
    rows = list(csv.reader(io.StringIO(Path(path).read_text())))
    if tuple(rows[0]) != CALIBRATION_COLUMNS:
        raise ValueError(f"unexpected calibration header {rows[0]}")
    return [CalibrationRow(r[0], r[1], GrowthPercent(0.0, float(r[2]), float(r[3]), float(r[4]))) for r in rows[1:]]


# ---------------------------------------------------------------------------
# comparison

@dataclass
class ComparisonReport:
    enabled: RunReport
    disabled: RunReport
    comparison: LoadComparison


def run_comparison(case: NetworkCase, spec: ScenarioSpec, thresholds: Thresholds,
                   cfg: RunConfig = RunConfig()) -> ComparisonReport:
    """The same scenario with islanding enabled and disabled."""
    on = run_scenario(case, spec, cfg, thresholds, islanding=True)
    off = run_scenario(case, spec, cfg, thresholds, islanding=False)
    return ComparisonReport(on, off, compare_load_loss(on.outcome, off.outcome))


# ---------------------------------------------------------------------------
# export

RELAY_COLUMNS = ("t", "kind", "target", "source")


def _trajectory_csv(rep: RunReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", *(f"delta_{m}" for m in rep.machine_ids), *(f"omega_{m}" for m in rep.machine_ids)])
    for k, t in enumerate(rep.times):
        w.writerow([fmt(t), *map(fmt, rep.delta[k]), *map(fmt, rep.omega[k])])
    return buf.getvalue()


def _relay_csv(rep: RunReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RELAY_COLUMNS)
    for t, kind, target, source in rep.relay_log:
        w.writerow([fmt(t), kind, target, source])
    return buf.getvalue()


def _summary(rep: RunReport) -> dict:
    doc = {
        "scenario": rep.scenario_id,
        "label": rep.label.value,
        "label_time": rep.label.time,
        "separated_groups": [list(s) for s in rep.label.separated_groups],
        "partition": [list(g) for g in rep.partition.groups],
        "signal": {"fired": rep.signal.fired, "time": rep.signal.time, "crossings": list(rep.signal.crossings)},
        "peak_growth": None if rep.peak is None else list(rep.peak.values()),
        "armed": list(rep.armed),
        "boundary": None if rep.plan is None else sorted(rep.plan.boundary_branches),
    }
    if rep.outcome is not None:
        o = rep.outcome
        doc["load"] = {"total": o.total_load, "served": o.served, "lost": o.lost, "deenergized": o.deenergized}
    return doc


def export_report(rep: RunReport, out_dir: str | Path) -> list[Path]:
    """Write trajectory, PSI, relay-log, outcome and summary files; byte-stable."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "trajectory.csv": _trajectory_csv(rep),
        "psi.csv": write_psi_csv(rep.psi, rep.growths, rep.signal),
        "relays.csv": _relay_csv(rep),
        "summary.json": json.dumps(_summary(rep), indent=2, sort_keys=True) + "\n",
    }
    if rep.outcome is not None:
        files["outcome.csv"] = write_outcome_csv(rep.outcome)
    paths = []
    for name, text in files.items():
        p = out / name
        p.write_text(text)
        paths.append(p)
    return paths


def read_report(out_dir: str | Path) -> RunReport:
    """Parse an exported run back into a RunReport (outcome and plan are not restored)."""
    d = Path(out_dir)
    rows = list(csv.reader(io.StringIO((d / "trajectory.csv").read_text())))
    header = rows[0]
    m = (len(header) - 1) // 2
    ids = tuple(h[len("delta_"):] for h in header[1:1 + m])
    data = np.array([[float(x) for x in r] for r in rows[1:]], dtype=float).reshape(len(rows) - 1, 1 + 2 * m)
    samples, growths, _ = read_psi_csv(d / "psi.csv")
    rel = list(csv.reader(io.StringIO((d / "relays.csv").read_text())))
    if tuple(rel[0]) != RELAY_COLUMNS:
        raise ValueError("unexpected relay-log header")
    doc = json.loads((d / "summary.json").read_text())
    sig = doc["signal"]
    return RunReport(
        scenario_id=doc["scenario"], machine_ids=ids,
        times=data[:, 0], delta=data[:, 1:1 + m], omega=data[:, 1 + m:],
        psi=samples, growths=growths,
        signal=IslandingSignal(sig["fired"], sig["time"], tuple(sig["crossings"])),
        relay_log=[(float(r[0]), r[1], r[2], r[3]) for r in rel[1:]],
        label=StabilityLabel(doc["label"], tuple(tuple(s) for s in doc["separated_groups"]), doc["label_time"]),
        partition=GeneratorPartition(tuple(tuple(g) for g in doc["partition"])),
        peak=None if doc["peak_growth"] is None else GrowthPercent(0.0, *doc["peak_growth"]),
        armed=tuple(doc["armed"]),
    )


def reports_equal(a: RunReport, b: RunReport) -> bool:
    """Equality of the exported content of two reports."""
    arr = lambda x, y: np.array_equal(np.asarray(x), np.asarray(y), equal_nan=True)
    return (a.scenario_id == b.scenario_id and a.machine_ids == b.machine_ids
            and arr(a.times, b.times) and arr(a.delta, b.delta) and arr(a.omega, b.omega)
            and [s.values() + (s.time,) for s in a.psi] == [s.values() + (s.time,) for s in b.psi]
            and arr([g.values() for g in a.growths], [g.values() for g in b.growths])
            and a.signal == b.signal and a.relay_log == b.relay_log and a.label == b.label
            and a.partition == b.partition and a.armed == b.armed
            and (a.peak is None) == (b.peak is None)
            and (a.peak is None or arr(a.peak.values(), b.peak.values())))
