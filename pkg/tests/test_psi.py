import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from islandpsi.coherency import KsGM
from islandpsi.protection import ISLAND_FORMATION, STABLE, StabilityLabel
from islandpsi.psi import (CalibrationError, GrowthPercent, IslandingSignal, OnlineDetector, PsiSample,
                           SaturatedIndexError, Thresholds, UndefinedIndexError, calibrate_thresholds, cgc, dcgc,
                           detect, growth_percent, igc, load_thresholds, peak_growth, psi_sample, read_psi_csv,
                           reference_growth_rows, save_thresholds, write_psi_csv)

EXAMPLE = np.array([[0.9, 0.8], [0.8, 0.9]])


def random_ksgm(rng, u):
    a = rng.uniform(0, 1, (u, u))
    return 0.5 * (a + a.T)


# --- indices --------------------------------------------------------------------

def test_index_examples():
    assert cgc(EXAMPLE) == pytest.approx(0.9, abs=1e-15)
    assert igc(EXAMPLE) == pytest.approx(0.8, abs=1e-15)
    assert dcgc(EXAMPLE) == pytest.approx(1.125, abs=1e-15)
    assert cgc(np.eye(3)) == 1.0
    a = np.full((3, 3), 0.4)
    assert igc(a) == pytest.approx(0.4)
    assert cgc(KsGM(EXAMPLE)) == cgc(EXAMPLE)


def test_cgc_matches_direct_sum():
    a = random_ksgm(np.random.default_rng(0), 4)
    assert abs(cgc(a) - (a[0, 0] + a[1, 1] + a[2, 2] + a[3, 3]) / 4) < 1e-15


@pytest.mark.parametrize("u", [2, 3, 5, 8])
def test_dcgc_of_constant_blocks(u):
    d, o = 0.7, 0.35
    a = np.full((u, u), o)
    np.fill_diagonal(a, d)
    assert dcgc(a) == pytest.approx(d / o, rel=1e-14)


def test_single_group_is_undefined():
    with pytest.raises(UndefinedIndexError):
        igc(np.array([[0.9]]))
    with pytest.raises(UndefinedIndexError):
        dcgc(np.array([[0.9]]))
    assert cgc(np.array([[0.9]])) == 0.9


def test_saturated_dcgc():
    a = np.diag([0.8, 0.6])
    with pytest.raises(SaturatedIndexError) as err:
        dcgc(a)
    assert err.value.floor == 1e-6 and err.value.saturated == pytest.approx(0.7e6)
    s = psi_sample(a, 1.0)
    assert s.saturated and s.dcgc == pytest.approx(0.7e6)


def test_bad_shapes_rejected():
    with pytest.raises(ValueError):
        cgc(np.zeros((2, 3)))


def test_ratio_identity_on_random_matrices():
    rng = np.random.default_rng(1)
    for _ in range(10_000):
        a = random_ksgm(rng, int(rng.integers(2, 8)))
        assert abs(dcgc(a) - cgc(a) / igc(a)) < 1e-12


# --- growth ------------------------------------------------------------------------

def test_growth_examples():
    base = PsiSample(0.0, 0.4, 0.3, 0.2)
    assert growth_percent(base, base).values() == (0.0, 0.0, 0.0)
    g = growth_percent(PsiSample(1.0, 0.772, 0.3, 0.2), base)
    assert g.g_cgc == pytest.approx(93.0, abs=1e-9)


def test_growth_is_scale_invariant():
    base, s = PsiSample(0, 0.4, 0.3, 0.2), PsiSample(1, 0.5, 0.6, 0.25)
    doubled = growth_percent(PsiSample(1, 1.0, 1.2, 0.5), PsiSample(0, 0.8, 0.6, 0.4))
    assert np.allclose(growth_percent(s, base).values(), doubled.values(), atol=1e-12)


def test_unreliable_baseline_flagged():
    g = growth_percent(PsiSample(1, 0.5, 0.2, 1.0), PsiSample(0, 0.5, 0.0, 1.0))
    assert g.unreliable and math.isnan(g.g_igc) and g.g_cgc == 0.0


def test_peak_growth_is_componentwise():
    p = peak_growth([GrowthPercent(0, 1, 5, 0), GrowthPercent(1, 3, 2, 0), GrowthPercent(2, 2, 2, 7)])
    assert p.values() == (3, 5, 7) and p.time == 2
    with pytest.raises(ValueError):
        peak_growth([])


# --- calibration ---------------------------------------------------------------------

ISLAND_ROWS = [(452, 872, 132), (251, 660, 78), (100, 16285, 162), (93, 251, 44),
               (455, 958, 144), (233, 792, 88), (190, 42132, 173)]


def test_calibration_on_reference_island_rows():
    th = calibrate_thresholds([(ISLAND_FORMATION, GrowthPercent(0, *r)) for r in ISLAND_ROWS])
    assert th.values() == (93, 251, 44)


def test_calibration_single_row():
    th = calibrate_thresholds([(StabilityLabel(ISLAND_FORMATION, ((0,), (1,))), GrowthPercent(0, 10, 20, 30))])
    assert th.values() == (10, 20, 30)


def test_calibration_componentwise_minima():
    rng = np.random.default_rng(4)
    for _ in range(50):
        rows = rng.uniform(0, 500, (int(rng.integers(1, 12)), 3))
        labels = rng.choice([ISLAND_FORMATION, STABLE], size=len(rows))
        labels[0] = ISLAND_FORMATION
        th = calibrate_thresholds([(lab, GrowthPercent(0, *r)) for lab, r in zip(labels, rows)])
        for k in range(3):
            assert th.values()[k] == min(r[k] for lab, r in zip(labels, rows) if lab == ISLAND_FORMATION)


def test_calibration_needs_island_rows():
    with pytest.raises(CalibrationError):
        calibrate_thresholds([(STABLE, GrowthPercent(0, 1, 2, 3))])


def test_reference_rows_fixture():
    rows = reference_growth_rows()
    assert [r[0] for r in rows] == list(range(1, 17))
    assert {r[0] for r in rows if r[1] == ISLAND_FORMATION} == {6, 7, 8, 13, 14, 15, 16}
    th = calibrate_thresholds([(lab, g) for _, lab, g in rows])
    assert th.values() == (93, 251, 44)


def test_threshold_file_round_trip(tmp_path):
    th = Thresholds(11.5, 21.25, 0.0)
    save_thresholds(th, tmp_path / "th.json")
    assert load_thresholds(tmp_path / "th.json") == th
    with pytest.raises(ValueError):
        Thresholds(-1, 0, 0)


# --- detection ----------------------------------------------------------------------------

TH = Thresholds(93, 251, 44)


def stream_with_crossings(cross, dt=0.01, t_end=12.0, level=(1000, 1000, 1000)):
    n = int(round(t_end / dt))
    out = []
    for k in range(n + 1):
        t = round(k * dt, 10)
        vals = [level[i] if c is not None and t >= c - 1e-9 else 0.0 for i, c in enumerate(cross)]
        out.append(GrowthPercent(t, *vals))
    return out


def test_fires_at_last_crossing():
    sig = detect(stream_with_crossings((5.82, 5.03, 6.29)), TH, confirm=0.0)
    assert sig.fired and sig.time == pytest.approx(6.29)
    assert sig.crossings == pytest.approx((5.82, 5.03, 6.29))


def test_confirmation_delay():
    sig = detect(stream_with_crossings((10.0, 10.0, 10.0)), TH, confirm=0.04)
    assert sig.time == pytest.approx(10.04)


def test_one_index_missing_means_no_signal():
    sig = detect(stream_with_crossings((1.0, None, 1.0)), TH, confirm=0.0)
    assert not sig.fired and sig.crossings[1] is None


def test_blips_are_debounced():
    s = stream_with_crossings((1.0, 1.0, 1.0))
    s[101] = GrowthPercent(s[101].time, 0, 0, 0)       # dip at 1.01 s
    sig = detect(s, TH, confirm=0.04)
    assert sig.crossings == pytest.approx((1.02, 1.02, 1.02))


def test_constant_baseline_never_fires():
    assert not detect([GrowthPercent(k * 0.01, 0, 0, 0) for k in range(500)], Thresholds(1, 1, 1)).fired


def test_online_detector_fires_once_and_rejects_disorder():
    det = OnlineDetector(Thresholds(0, 0, 0), confirm=0.0)
    assert det.push(GrowthPercent(0.0, 1, 1, 1))
    assert not det.push(GrowthPercent(0.01, 1, 1, 1))
    with pytest.raises(ValueError):
        det.push(GrowthPercent(0.0, 1, 1, 1))
    with pytest.raises(ValueError):
        OnlineDetector(TH, confirm=-1)


def test_signal_invariants():
    with pytest.raises(ValueError):
        IslandingSignal(True, 1.0, (2.0, 0.5, 0.5))
    with pytest.raises(ValueError):
        IslandingSignal(True, None)


def _t(sig):
    return sig.time if sig.fired else math.inf


@settings(max_examples=100, deadline=None)
@given(vals=st.lists(st.tuples(*[st.floats(0, 300)] * 3), min_size=1, max_size=60),
       th=st.tuples(*[st.floats(0, 300)] * 3), drop=st.tuples(*[st.floats(0, 100)] * 3),
       confirm=st.sampled_from([0.0, 0.02, 0.04]))
def test_detect_monotone_in_thresholds(vals, th, drop, confirm):
    stream = [GrowthPercent(round(0.01 * k, 10), *v) for k, v in enumerate(vals)]
    hi = Thresholds(*th)
    lo = Thresholds(*(max(0.0, a - b) for a, b in zip(th, drop)))
    assert _t(detect(stream, lo, confirm)) <= _t(detect(stream, hi, confirm))


# --- CSV -----------------------------------------------------------------------------------

def test_psi_csv_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    samples = [PsiSample(0.01 * k, *rng.uniform(0, 1, 3)) for k in range(20)]
    growths = [growth_percent(s, samples[0]) for s in samples]
    sig = IslandingSignal(True, 0.1, (0.05, 0.06, 0.1))
    text = write_psi_csv(samples, growths, sig, tmp_path / "psi.csv")
    s2, g2, flags = read_psi_csv(tmp_path / "psi.csv")
    assert s2 == samples and g2 == growths
    assert flags == [int(k >= 10) for k in range(20)]
    assert text.splitlines()[0] == "t,cgc,igc,dcgc,g_cgc,g_igc,g_dcgc,signal"
    assert write_psi_csv(s2, g2, sig) == text
