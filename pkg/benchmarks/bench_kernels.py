"""Compare the compiled and numpy kernel backends on the 39-bus case.

Usage: python benchmarks/bench_kernels.py [--repeat N] [--seconds T]
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from islandpsi.grid import ieee39
from islandpsi.kernels import available_backends
from islandpsi.powerflow import init_classical, solve_power_flow


def _best(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seconds", type=float, default=5.0, help="simulated horizon for the RK4 benchmark")
    ap.add_argument("--dt", type=float, default=1e-3)
    args = ap.parse_args(argv)

    case = ieee39()
    init = init_classical(case, solve_power_flow(case))
    g = np.ascontiguousarray(init.reduced.g)
    b = np.ascontiguousarray(init.reduced.b)
    nsteps = int(round(args.seconds / args.dt))
    rng = np.random.default_rng(0)
    kick = 0.05 * rng.standard_normal(len(init.emf))

    backends = available_backends()
    results = {}
    finals = {}
    for name, mod in backends.items():
        def pe():
            for _ in range(1000):
                mod.electrical_power(g, b, init.emf, init.delta0)

        def rk4():
            d = init.delta0 + kick
            w = np.zeros_like(d)
            mod.rk4_steps(d, w, init.emf, g, b, init.p_mech, 2.0 * init.inertia, init.damping,
                          2 * np.pi * 60, args.dt, nsteps)
            finals[name] = d

        results[name] = (_best(pe, args.repeat) / 1000, _best(rk4, args.repeat))

    print(f"{'backend':<8} {'P_e call (us)':>14} {'RK4 ' + str(args.seconds) + ' s (ms)':>16}")
    for name, (t_pe, t_rk) in results.items():
        print(f"{name:<8} {t_pe * 1e6:14.2f} {t_rk * 1e3:16.2f}")
    if "cython" in results:
        py, cy = results["python"], results["cython"]
        print(f"speedup  {py[0] / cy[0]:14.1f}x {py[1] / cy[1]:15.1f}x")
        print(f"max |delta_cython - delta_python| after run: {np.max(np.abs(finals['cython'] - finals['python'])):.2e}")
    else:
        print("compiled backend not built; only the numpy fallback is available")


if __name__ == "__main__":
    main()
