import numpy as np
import pytest

from islandpsi.grid import ieee39, parse_case
from islandpsi.powerflow import init_classical, solve_power_flow

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(n: int, passed: bool, detail: str = "") -> None:
    ACCEPTANCE[n] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def case39():
    return ieee39()


@pytest.fixture(scope="session")
def pf39(case39):
    return solve_power_flow(case39)


@pytest.fixture(scope="session")
def init39(case39, pf39):
    return init_classical(case39, pf39)


def two_bus(p_load=0.5, q_load=0.0, x=0.1, r=0.0, b=0.0, machines=()):
    return parse_case({
        "base_mva": 100.0,
        "buses": [{"id": 1, "kind": "slack", "voltage_setpoint": 1.0},
                  {"id": 2, "kind": "PQ", "load_p": p_load, "load_q": q_load}],
        "branches": [{"id": "1-2", "from_bus": 1, "to_bus": 2, "r": r, "x": x, "b_charging": b}],
        "machines": list(machines),
    })


def smib(p=0.8, x_line=0.4, xdp=0.2, h=3.5, d=0.0, h_inf=1e9):
    """Machine at bus 2 feeding an (effectively) infinite bus at bus 1 over one line."""
    return parse_case({
        "base_mva": 100.0,
        "buses": [{"id": 1, "kind": "slack", "voltage_setpoint": 1.0},
                  {"id": 2, "kind": "PV", "voltage_setpoint": 1.0}],
        "branches": [{"id": "2-1", "from_bus": 2, "to_bus": 1, "r": 0.0, "x": x_line}],
        "machines": [
            {"id": "INF", "bus": 1, "h": h_inf, "d": 0.0, "xdp": 1e-6, "mva_base": 100.0, "p_gen": -p},
            {"id": "G", "bus": 2, "h": h, "d": d, "xdp": xdp, "mva_base": 100.0, "p_gen": p},
        ],
    })


def random_reduced(rng, m):
    from islandpsi.grid import ReducedNetwork
    a = rng.normal(size=(m, m)) + 1j * rng.normal(size=(m, m))
    y = 0.5 * (a + a.T)
    return ReducedNetwork(tuple(f"M{i}" for i in range(m)), y)


@pytest.fixture(scope="session")
def calibration39(case39):
    from islandpsi.harness import calibration_batch, run_calibration
    return run_calibration(case39, calibration_batch())
