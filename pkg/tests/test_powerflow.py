import csv
from pathlib import Path

import numpy as np
import pytest
from scipy.optimize import root

from conftest import two_bus
from islandpsi.grid import build_ybus
from islandpsi.kernels import electrical_power
from islandpsi.powerflow import (PowerFlowError, generator_injections, init_classical, internal_emf,
                                 power_mismatch, solve_power_flow, specified_injections)

DATA = Path(__file__).parent / "data"


def rectangular_reference(case):
    """Independent solver: V = e + jf, residuals in rectangular form, scipy hybr."""
    y = build_ybus(case).entries
    kinds = [b.kind for b in case.buses]
    s = specified_injections(case)
    n = len(kinds)

    def unpack(x):
        return x[:n] + 1j * x[n:]

    def resid(x):
        v = unpack(x)
        sc = v * np.conj(y @ v)
        out = []
        for k, kind in enumerate(kinds):
            if kind == "slack":
                out += [v[k].real - case.buses[k].voltage_setpoint, v[k].imag]
            elif kind == "PV":
                out += [sc[k].real - s[k].real, abs(v[k]) ** 2 - case.buses[k].voltage_setpoint ** 2]
            else:
                out += [sc[k].real - s[k].real, sc[k].imag - s[k].imag]
        return np.array(out)

    x0 = np.r_[np.ones(n), np.zeros(n)]
    sol = root(resid, x0, method="hybr", tol=1e-13)
    assert sol.success, sol.message
    return unpack(sol.x)


def test_flat_profile_without_load():
    case = two_bus(p_load=0.0)
    pf = solve_power_flow(case)
    assert pf.iterations == 0
    assert pf.mismatch_inf_norm == 0.0
    assert np.allclose(pf.voltages, [1, 1])


def test_two_bus_closed_form():
    pf = solve_power_flow(two_bus(p_load=0.5, x=0.1), tol=1e-12)
    vm = np.sqrt((1 + np.sqrt(1 - 4 * 0.05 ** 2)) / 2)
    va = -np.arcsin(0.05 / vm)
    v2 = pf.voltage(2)
    assert abs(abs(v2) - vm) < 1e-10
    assert abs(np.angle(v2) - va) < 1e-10


def test_infeasible_case_raises():
    with pytest.raises(PowerFlowError):
        solve_power_flow(two_bus(p_load=20.0, x=0.1))


def test_39_bus_converges(pf39):
    assert pf39.iterations <= 10
    assert pf39.mismatch_inf_norm < 1e-8
    assert np.angle(pf39.voltage(31)) == 0.0


def test_39_bus_matches_independent_solver(case39, pf39):
    ref = rectangular_reference(case39)
    assert np.max(np.abs(pf39.voltages - ref)) < 1e-4


def test_39_bus_matches_published_solution(pf39):
    with open(DATA / "case39_published_voltages.csv") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        v = pf39.voltage(int(r["bus"]))
        assert abs(abs(v) - float(r["vm"])) < 1e-4
        assert abs(np.degrees(np.angle(v)) - float(r["va_deg"])) < 1e-3


def test_residual_self_consistent(case39, pf39):
    y = build_ybus(case39).entries
    mis = power_mismatch(y, pf39.voltages, specified_injections(case39))
    kinds = [b.kind for b in case39.buses]
    pv_pq = [k for k, t in enumerate(kinds) if t != "slack"]
    pq = [k for k, t in enumerate(kinds) if t == "PQ"]
    assert np.max(np.abs(np.r_[mis.real[pv_pq], mis.imag[pq]])) == pytest.approx(pf39.mismatch_inf_norm, abs=1e-15)


def test_power_balance(case39, pf39):
    v = pf39.voltages
    idx = case39.bus_index
    losses = 0j
    for br in case39.branches:
        f, t = idx[br.from_bus], idx[br.to_bus]
        ys = 1 / br.z
        sh = 0.5j * br.b_charging
        i_f = (v[f] / br.tap - v[t]) * ys / br.tap + sh * v[f] / br.tap ** 2
        i_t = (v[t] - v[f] / br.tap) * ys + sh * v[t]
        losses += v[f] * np.conj(i_f) + v[t] * np.conj(i_t)
    gen = generator_injections(case39, pf39).sum()
    load = sum(complex(b.load_p, b.load_q) for b in case39.buses)
    assert abs(gen - load - losses) < 1e-8


def test_internal_emf_example():
    e = internal_emf(1.0 + 0j, 0.8 + 0.2j, 0.3)
    assert e == pytest.approx(1.06 + 0.24j, abs=1e-15)
    assert abs(e) == pytest.approx(1.0868, abs=1e-4)
    assert np.degrees(np.angle(e)) == pytest.approx(12.76, abs=1e-2)


def test_internal_emf_without_current():
    v = 0.98 * np.exp(0.3j)
    assert internal_emf(v, 0j, 0.25) == v


def test_internal_emf_zero_voltage():
    with pytest.raises(ValueError):
        internal_emf(0j, 1 + 0j, 0.3)


def test_init_is_an_equilibrium(init39):
    red = init39.reduced
    pe = electrical_power(red.g, red.b, init39.emf, init39.delta0)
    assert np.max(np.abs(pe - init39.p_mech)) < 1e-8


def test_init_matches_dispatch(case39, pf39, init39):
    s = generator_injections(case39, pf39)
    assert np.allclose(init39.p_mech, s.real, atol=1e-8)
