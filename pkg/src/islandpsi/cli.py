"""Command-line entry point: calibrate, simulate, compare, report."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .dynamics import DivergenceError
from .grid import CaseError, ieee39, load_case_file
from .harness import (SCENARIO_DIR, RunConfig, ScenarioError, ScenarioRunError, calibration_batch,
                      export_report, load_scenario, read_calibration_csv, read_report, run_calibration,
                      run_comparison, run_scenario, write_calibration_csv)
from .psi import CalibrationError, load_thresholds, save_thresholds

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED, EXIT_CALIBRATION = 0, 1, 2, 3

log = logging.getLogger("islandpsi")


def _case(arg):
    return ieee39() if arg is None else load_case_file(arg)


def _scenario(arg: str):
    p = Path(arg)
    if not p.exists():
        p = SCENARIO_DIR / f"{arg}.json"
    return load_scenario(p)


def _config(args) -> RunConfig:
    return RunConfig(dt=args.dt, confirm=args.confirm,
                     on_divergence="raise" if args.stop_on_divergence else "isolate")


def cmd_calibrate(args) -> int:
    specs = [_scenario(s) for s in args.scenario] if args.scenario else calibration_batch()
    rep = run_calibration(_case(args.case), specs, _config(args), workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_calibration_csv(rep, out / "calibration.csv")
    save_thresholds(rep.thresholds, out / "thresholds.json")
    for r in rep.rows:
        print(f"{r.scenario_id:>12}  {r.label:<20} {r.peak.g_cgc:9.3f} {r.peak.g_igc:9.3f} {r.peak.g_dcgc:9.3f}")
    th = rep.thresholds
    print(f"thresholds: cgc={th.th_cgc:.6g} igc={th.th_igc:.6g} dcgc={th.th_dcgc:.6g}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    if len(args.scenario) != 1:
        raise ScenarioError("simulate takes exactly one --scenario")
    spec = _scenario(args.scenario[0])
    th = load_thresholds(args.thresholds) if args.thresholds else None
    rep = run_scenario(_case(args.case), spec, _config(args), th)
    export_report(rep, args.out)
    sig = f"signal at {rep.signal.time:.2f} s" if rep.signal.fired else "no signal"
    print(f"{spec.id}: {rep.label.value} ({sig})")
    return EXIT_OK


def cmd_compare(args) -> int:
    if len(args.scenario) != 1 or not args.thresholds:
        raise ScenarioError("compare takes exactly one --scenario and --thresholds")
    spec = _scenario(args.scenario[0])
    rep = run_comparison(_case(args.case), spec, load_thresholds(args.thresholds), _config(args))
    out = Path(args.out)
    export_report(rep.enabled, out / "with_islanding")
    export_report(rep.disabled, out / "without_islanding")
    c = rep.comparison
    doc = {"scenario": spec.id, "total_load": c.total_load, "served_with": c.served_with,
           "served_without": c.served_without, "lost_with": c.lost_with, "lost_without": c.lost_without,
           "saving": c.saving}
    (out / "comparison.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(f"{spec.id}: served {c.served_with:.3f} pu with islanding, {c.served_without:.3f} pu without "
          f"(total {c.total_load:.3f} pu)")
    return EXIT_OK


def cmd_report(args) -> int:
    out = Path(args.out)
    if (out / "calibration.csv").exists():
        rows = read_calibration_csv(out / "calibration.csv")
        th = load_thresholds(out / "thresholds.json")
        print(f"calibration: {len(rows)} scenarios, "
              f"{sum(r.label == 'island_formation' for r in rows)} island-forming")
        print(f"thresholds: cgc={th.th_cgc:.6g} igc={th.th_igc:.6g} dcgc={th.th_dcgc:.6g}")
        return EXIT_OK
    runs = sorted(p.parent for p in out.rglob("summary.json"))
    if not runs:
        raise ScenarioError(f"no exported results under {out}")
    for d in runs:
        rep = read_report(d)
        sig = f"{rep.signal.time:.2f} s" if rep.signal.fired else "-"
        trips = sum(1 for e in rep.relay_log if e[3] != "schedule")
        print(f"{d.relative_to(out) if d != out else d.name}: {rep.scenario_id} {rep.label.value} "
              f"signal={sig} relay_trips={trips}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="islandpsi", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn in (("calibrate", cmd_calibrate), ("simulate", cmd_simulate),
                     ("compare", cmd_compare), ("report", cmd_report)):
        s = sub.add_parser(name)
        s.set_defaults(func=fn)
        s.add_argument("--out", required=True, help="output directory")
        if name == "report":
            continue
        s.add_argument("--case", help="case JSON file (default: bundled 39-bus case)")
        s.add_argument("--scenario", action="append", default=[],
                       help="scenario file or bundled name (repeatable)")
        s.add_argument("--thresholds", help="thresholds JSON file")
        s.add_argument("--dt", type=float, default=1e-3, help="integration step, s")
        s.add_argument("--confirm", type=float, default=0.04, help="detector confirmation window, s")
        s.add_argument("--workers", type=int, default=1)
        s.add_argument("--stop-on-divergence", action="store_true",
                       help="abort (exit 2) instead of isolating a diverged island")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CalibrationError as err:
        print(f"calibration error: {err}", file=sys.stderr)
        return EXIT_CALIBRATION
    except ScenarioRunError as err:
        if isinstance(err.cause, DivergenceError):
            print(f"divergence: {err}", file=sys.stderr)
            return EXIT_DIVERGED
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except DivergenceError as err:
        print(f"divergence: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CaseError, ScenarioError, OSError, ValueError, KeyError) as err:
        print(f"input error: {err}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
