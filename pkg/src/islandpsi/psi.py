"""Power splitting indices, growth tracking, threshold calibration and the islanding detector."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .coherency import KsGM

EPS = 1e-6
TICK_TOL = 1e-9


class UndefinedIndexError(ValueError):
    """IGC/DCGC need at least two coherent groups."""


class SaturatedIndexError(ArithmeticError):
    def __init__(self, cgc: float, floor: float = EPS):
        self.cgc = cgc
        self.floor = floor
        self.saturated = cgc / floor
        super().__init__(f"IGC below floor {floor:g}; DCGC saturates at {self.saturated:.6g}")


class CalibrationError(ValueError):
    pass


def _matrix(m) -> np.ndarray:
    a = m.a if isinstance(m, KsGM) else np.asarray(m, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
        raise ValueError("KsGM must be a non-empty square matrix")
    return a


def cgc(m) -> float:
    """Mean of the diagonal: average intra-group coherency."""
    a = _matrix(m)
    return float(np.trace(a) / a.shape[0])


def igc(m) -> float:
    """Mean of the upper off-diagonal entries: average inter-group incoherency."""
    a = _matrix(m)
    u = a.shape[0]
    if u < 2:
        raise UndefinedIndexError("IGC is undefined for a single coherent group")
    return float(2.0 * np.triu(a, 1).sum() / (u * (u - 1)))


def dcgc(m, floor: float = EPS) -> float:
    a = _matrix(m)
    u = a.shape[0]
    if u < 2:
        raise UndefinedIndexError("DCGC is undefined for a single coherent group")
    off = np.triu(a, 1).sum()
    if 2.0 * off / (u * (u - 1)) < floor:
        raise SaturatedIndexError(cgc(a), floor)
    return float(0.5 * (u - 1) * np.trace(a) / off)


@dataclass(frozen=True)
class PsiSample:
    time: float
    cgc: float
    igc: float
    dcgc: float
    saturated: bool = False

    def values(self) -> tuple[float, float, float]:
        return (self.cgc, self.igc, self.dcgc)


def psi_sample(m, time: float = 0.0, floor: float = EPS) -> PsiSample:
    """All three indices of one KsGM; a saturated DCGC is reported as CGC / floor."""
    c, i = cgc(m), igc(m)
    try:
        return PsiSample(time, c, i, dcgc(m, floor))
    except SaturatedIndexError as err:
        return PsiSample(time, c, i, err.saturated, saturated=True)


@dataclass(frozen=True)
class GrowthPercent:
    time: float
    g_cgc: float
    g_igc: float
    g_dcgc: float
    unreliable: bool = False     # some baseline index at or below the floor; its growth is NaN

    def values(self) -> tuple[float, float, float]:
        return (self.g_cgc, self.g_igc, self.g_dcgc)


def growth_percent(sample: PsiSample, baseline: PsiSample, floor: float = EPS) -> GrowthPercent:
    out = []
    flagged = False
    for x, x0 in zip(sample.values(), baseline.values()):
        if not x0 > floor:
            flagged = True
            out.append(math.nan)
        else:
            out.append(100.0 * (x - x0) / x0)
    return GrowthPercent(sample.time, *out, unreliable=flagged)


def peak_growth(stream: Iterable[GrowthPercent]) -> GrowthPercent:
    """Component-wise maximum over a run (time = time of the latest of the three peaks)."""
    best = [-math.inf] * 3
    when = [0.0] * 3
    flagged = False
    for g in stream:
        flagged |= g.unreliable
        for k, v in enumerate(g.values()):
            if v > best[k]:
                best[k], when[k] = v, g.time
    if best[0] == -math.inf and best[1] == -math.inf and best[2] == -math.inf:
        raise ValueError("empty growth stream")
    return GrowthPercent(max(when), *best, unreliable=flagged)


@dataclass(frozen=True)
class Thresholds:
    th_cgc: float
    th_igc: float
    th_dcgc: float

    def __post_init__(self):
        if min(self.values()) < 0 or not all(map(math.isfinite, self.values())):
            raise ValueError("thresholds must be finite and non-negative")

    def values(self) -> tuple[float, float, float]:
        return (self.th_cgc, self.th_igc, self.th_dcgc)


def calibrate_thresholds(rows: Sequence[tuple]) -> Thresholds:
    """Per-index minimum of the peak growths over island-forming rows.

    ``rows`` holds (label, peak) pairs; ``label`` may be a StabilityLabel or
    its string value.
    """
    picked = []
    for label, peak in rows:
        value = getattr(label, "value", label)
        if value == "island_formation":
            picked.append(peak.values() if isinstance(peak, GrowthPercent) else tuple(peak))
    if not picked:
        raise CalibrationError("no island_formation rows to calibrate from")
    arr = np.array(picked, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise CalibrationError("island_formation rows contain undefined growth values")
    mins = arr.min(axis=0)
    return Thresholds(*(float(v) for v in mins))


def save_thresholds(th: Thresholds, path: str | Path) -> None:
    Path(path).write_text(json.dumps(asdict(th), indent=2) + "\n")


def load_thresholds(path: str | Path) -> Thresholds:
    doc = json.loads(Path(path).read_text())
    return Thresholds(float(doc["th_cgc"]), float(doc["th_igc"]), float(doc["th_dcgc"]))


# ---------------------------------------------------------------------------
# detection

@dataclass(frozen=True)
class IslandingSignal:
    fired: bool
    time: float | None = None
    crossings: tuple = (None, None, None)

    def __post_init__(self):
        if self.fired:
            if self.time is None or any(c is None for c in self.crossings):
                raise ValueError("a fired signal needs a time and three crossing times")
            if self.time < max(self.crossings) - TICK_TOL:
                raise ValueError("signal cannot precede its last crossing")


class OnlineDetector:
    """Streaming AND-logic detector.

    An index has crossed at tick t when its growth reaches the threshold at t
    and stays there at every tick up to t + confirm. The signal is raised at
    the first tick at or after (latest crossing + confirm).
    """

    def __init__(self, th: Thresholds, confirm: float = 0.04):
        if not confirm >= 0:
            raise ValueError("confirm must be >= 0")
        self.th = th.values()
        self.confirm = confirm
        self._run_start: list[float | None] = [None, None, None]
        self.crossings: list[float | None] = [None, None, None]
        self.signal = IslandingSignal(False)
        self._last_t = -math.inf

    @property
    def fired(self) -> bool:
        return self.signal.fired

    def push(self, g: GrowthPercent) -> bool:
        """Consume one tick; True exactly once, on the tick the signal fires."""
        if g.time < self._last_t:
            raise ValueError("growth stream must be time-ordered")
        self._last_t = g.time
        if self.signal.fired:
            return False
        for k, (v, th) in enumerate(zip(g.values(), self.th)):
            if self.crossings[k] is not None:
                continue
            if v >= th:
                if self._run_start[k] is None:
                    self._run_start[k] = g.time
                if g.time - self._run_start[k] >= self.confirm - TICK_TOL:
                    self.crossings[k] = self._run_start[k]
            else:
                self._run_start[k] = None
        if all(c is not None for c in self.crossings):
            if g.time >= max(self.crossings) + self.confirm - TICK_TOL:
                self.signal = IslandingSignal(True, g.time, tuple(self.crossings))
                return True
        return False


def detect(stream: Iterable[GrowthPercent], th: Thresholds, confirm: float = 0.04) -> IslandingSignal:
    det = OnlineDetector(th, confirm)
    for g in stream:
        if det.push(g):
            break
    if det.fired:
        return det.signal
    return IslandingSignal(False, None, tuple(det.crossings))


# ---------------------------------------------------------------------------
# PSI CSV

PSI_COLUMNS = ("t", "cgc", "igc", "dcgc", "g_cgc", "g_igc", "g_dcgc", "signal")


def fmt(x: float) -> str:
    """Shortest round-trip float text; stable across runs."""
    return repr(float(x))


def write_psi_csv(samples: Sequence[PsiSample], growths: Sequence[GrowthPercent],
                  signal: IslandingSignal, path: str | Path | None = None) -> str:
    if len(samples) != len(growths):
        raise ValueError("samples and growths differ in length")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PSI_COLUMNS)
    for s, g in zip(samples, growths):
        on = int(signal.fired and s.time >= signal.time - TICK_TOL)
        w.writerow([fmt(s.time), fmt(s.cgc), fmt(s.igc), fmt(s.dcgc),
                    fmt(g.g_cgc), fmt(g.g_igc), fmt(g.g_dcgc), on])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def read_psi_csv(text_or_path) -> tuple[list[PsiSample], list[GrowthPercent], list[int]]:
    text = text_or_path
    if isinstance(text_or_path, Path) or (isinstance(text_or_path, str) and "\n" not in text_or_path):
        text = Path(text_or_path).read_text()
    rows = list(csv.reader(io.StringIO(text)))
    if tuple(rows[0]) != PSI_COLUMNS:
        raise ValueError(f"unexpected PSI header {rows[0]}")
    samples, growths, flags = [], [], []
    for r in rows[1:]:
        t, c, i, d, gc, gi, gd = (float(x) for x in r[:7])
        samples.append(PsiSample(t, c, i, d))
        growths.append(GrowthPercent(t, gc, gi, gd, unreliable=any(map(math.isnan, (gc, gi, gd)))))
        flags.append(int(r[7]))
    return samples, growths, flags


def reference_growth_rows() -> list[tuple[int, str, GrowthPercent]]:
    """The bundled reference calibration batch: (scenario, label, peak growth)."""
    from .grid import DATA_DIR
    doc = json.loads((DATA_DIR / "reference_growths.json").read_text())
    return [(r["scenario"], r["label"], GrowthPercent(0.0, float(r["g_cgc"]), float(r["g_igc"]), float(r["g_dcgc"])))
            for r in doc["rows"]]
