"""AC power flow (polar Newton-Raphson) and classical-model initialization."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .grid import NetworkCase, ReducedNetwork, augmented_ybus, build_ybus, internal_node, kron_reduce


class PowerFlowError(RuntimeError):
    pass


@dataclass(frozen=True)
class PowerFlowSolution:
    bus_ids: tuple[int, ...]
    voltages: np.ndarray = field(repr=False)
    mismatch_inf_norm: float
    iterations: int

    def voltage(self, bus_id: int) -> complex:
        return complex(self.voltages[self.bus_ids.index(bus_id)])


@dataclass(frozen=True)
class DynamicInit:
    machine_ids: tuple[str, ...]
    emf: np.ndarray = field(repr=False)
    delta0: np.ndarray = field(repr=False)
    p_mech: np.ndarray = field(repr=False)
    inertia: np.ndarray = field(repr=False)   # H on system base, s
    damping: np.ndarray = field(repr=False)   # D on system base, pu
    reduced: ReducedNetwork
    bus_voltages: np.ndarray = field(repr=False)


def specified_injections(case: NetworkCase) -> np.ndarray:
    idx = case.bus_index
    s = np.array([complex(-b.load_p, -b.load_q) for b in case.buses])
    for m in case.machines:
        s[idx[m.bus]] += complex(m.p_gen, m.q_gen)
    return s


def power_mismatch(ybus: np.ndarray, v: np.ndarray, s_spec: np.ndarray) -> np.ndarray:
    return v * np.conj(ybus @ v) - s_spec


def _dsbus_dv(ybus, v):
    ibus = ybus @ v
    vnorm = v / np.abs(v)
    dv = np.diag(v)
    ds_dva = 1j * dv @ np.conj(np.diag(ibus) - ybus @ dv)
    ds_dvm = dv @ np.conj(ybus @ np.diag(vnorm)) + np.conj(np.diag(ibus)) @ np.diag(vnorm)
    return ds_dva, ds_dvm


def solve_power_flow(case: NetworkCase, tol: float = 1e-8, max_iter: int = 20,
                     v0: np.ndarray | None = None) -> PowerFlowSolution:
    """Full Newton-Raphson in polar coordinates from a flat (or warm) start.

    Q limits are not enforced.
    """
    ybus = build_ybus(case).entries
    kinds = [b.kind for b in case.buses]
    slack = [k for k, t in enumerate(kinds) if t == "slack"]
    pv = [k for k, t in enumerate(kinds) if t == "PV"]
    pq = [k for k, t in enumerate(kinds) if t == "PQ"]
    pvpq = pv + pq
    s_spec = specified_injections(case)

    if v0 is None:
        v = np.ones(len(kinds), dtype=complex)
        for k in slack + pv:
            v[k] = case.buses[k].voltage_setpoint
    else:
        v = np.asarray(v0, dtype=complex).copy()
        for k in slack + pv:
            v[k] = case.buses[k].voltage_setpoint * np.exp(1j * np.angle(v[k]))
    v[slack] = np.abs(v[slack])

    def residual(v):
        mis = power_mismatch(ybus, v, s_spec)
        return np.r_[mis.real[pvpq], mis.imag[pq]]

    f = residual(v)
    norm = float(np.max(np.abs(f))) if f.size else 0.0
    it = 0
    while norm > tol:
        if it >= max_iter:
            raise PowerFlowError(f"power flow did not converge in {max_iter} iterations "
                                 f"(mismatch {norm:.3e})")
        ds_dva, ds_dvm = _dsbus_dv(ybus, v)
        jac = np.block([
            [ds_dva.real[np.ix_(pvpq, pvpq)], ds_dvm.real[np.ix_(pvpq, pq)]],
            [ds_dva.imag[np.ix_(pq, pvpq)], ds_dvm.imag[np.ix_(pq, pq)]],
        ])
        try:
            dx = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError:
            raise PowerFlowError("power-flow Jacobian is singular") from None
        va = np.angle(v)
        vm = np.abs(v)
        va[pvpq] += dx[:len(pvpq)]
        vm[pq] += dx[len(pvpq):]
        v = vm * np.exp(1j * va)
        it += 1
        f = residual(v)
        norm = float(np.max(np.abs(f)))
        if not np.isfinite(norm):
            raise PowerFlowError("power flow diverged")
    return PowerFlowSolution(tuple(case.bus_ids), v, norm, it)


def generator_injections(case: NetworkCase, pf: PowerFlowSolution) -> np.ndarray:
    """Complex power delivered by each machine at its terminal.

    Bus generation is recovered from the solved voltages and shared among
    the machines of a bus in proportion to scheduled P (equally if zero).
    """
    ybus = build_ybus(case).entries
    v = pf.voltages
    s_bus = v * np.conj(ybus @ v)
    idx = case.bus_index
    s_gen_bus = s_bus + np.array([complex(b.load_p, b.load_q) for b in case.buses])
    out = np.zeros(len(case.machines), dtype=complex)
    by_bus: dict[int, list[int]] = {}
    for k, m in enumerate(case.machines):
        by_bus.setdefault(m.bus, []).append(k)
    for bus, ks in by_bus.items():
        p = np.array([case.machines[k].p_gen for k in ks])
        share = p / p.sum() if p.sum() != 0 else np.full(len(ks), 1.0 / len(ks))
        for k, w in zip(ks, share):
            out[k] = w * s_gen_bus[idx[bus]]
    return out


def internal_emf(v_t: complex, s: complex, xdp: float) -> complex:
    """E = V_t + j X'd I_t with I_t = conj(S / V_t)."""
    if v_t == 0:
        raise ValueError("machine terminal voltage is zero")
    i_t = np.conj(s / v_t)
    return v_t + 1j * xdp * i_t


def load_admittances(case: NetworkCase, voltages: np.ndarray) -> np.ndarray:
    vm2 = np.abs(voltages) ** 2
    return np.array([complex(b.load_p, -b.load_q) for b in case.buses]) / vm2


def init_classical(case: NetworkCase, pf: PowerFlowSolution) -> DynamicInit:
    idx = case.bus_index
    s_gen = generator_injections(case, pf)
    xdp = case.xdp_sys()
    e = np.array([internal_emf(complex(pf.voltages[idx[m.bus]]), s_gen[k], xdp[k])
                  for k, m in enumerate(case.machines)])
    y_aug = augmented_ybus(case, pf.voltages)
    red = kron_reduce(y_aug, [internal_node(m.id) for m in case.machines])
    emf = np.abs(e)
    delta0 = np.angle(e)
    p_mech = kernels.electrical_power(red.g, red.b, emf, delta0)
    return DynamicInit(
        machine_ids=tuple(case.machine_ids),
        emf=emf, delta0=delta0, p_mech=p_mech,
        inertia=case.h_sys(), damping=case.d_sys(),
        reduced=red, bus_voltages=pf.voltages.copy(),
    )
