"""Pure-numpy reference kernels (fallback when the compiled extension is absent)."""
import numpy as np


def electrical_power(g, b, emf, delta):
    """P_i = E_i^2 G_ii + sum_j E_i E_j (B_ij sin d_ij + G_ij cos d_ij)."""
    re = emf * np.cos(delta)
    im = emf * np.sin(delta)
    i_re = g @ re - b @ im
    i_im = g @ im + b @ re
    return re * i_re + im * i_im


def sync_matrix(g, b, emf, delta):
    """K_pq = E_p E_q (B_pq cos d_pq - G_pq sin d_pq) with zero diagonal (unsymmetrized)."""
    dd = delta[:, None] - delta[None, :]
    k = np.outer(emf, emf) * (b * np.cos(dd) - g * np.sin(dd))
    np.fill_diagonal(k, 0.0)
    return k


def rk4_steps(delta, omega, emf, g, b, pm, m, d, ws, dt, nsteps):
    """Advance ``delta``/``omega`` in place by ``nsteps`` RK4 steps.

    Returns the 0-based index of the first step producing a non-finite state,
    or -1. Integration stops at that step.
    """
    with np.errstate(invalid="ignore", over="ignore"):
        return _rk4(delta, omega, emf, g, b, pm, m, d, ws, dt, nsteps)


def _rk4(delta, omega, emf, g, b, pm, m, d, ws, dt, nsteps):
    h2 = 0.5 * dt
    h6 = dt / 6.0
    for n in range(nsteps):
        k1d = ws * omega
        k1w = (pm - electrical_power(g, b, emf, delta) - d * omega) / m
        d2 = delta + h2 * k1d
        w2 = omega + h2 * k1w
        k2d = ws * w2
        k2w = (pm - electrical_power(g, b, emf, d2) - d * w2) / m
        d3 = delta + h2 * k2d
        w3 = omega + h2 * k2w
        k3d = ws * w3
        k3w = (pm - electrical_power(g, b, emf, d3) - d * w3) / m
        d4 = delta + dt * k3d
        w4 = omega + dt * k3w
        k4d = ws * w4
        k4w = (pm - electrical_power(g, b, emf, d4) - d * w4) / m
        delta += h6 * (k1d + 2.0 * k2d + 2.0 * k3d + k4d)
        omega += h6 * (k1w + 2.0 * k2w + 2.0 * k3w + k4w)
        if not (np.isfinite(delta).all() and np.isfinite(omega).all()):
            return n
    return -1
