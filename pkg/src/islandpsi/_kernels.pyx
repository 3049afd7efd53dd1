# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled swing-equation kernels; same contracts as ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sin, cos, isfinite

cnp.import_array()


cdef void _pe(const double[:, ::1] g, const double[:, ::1] b, const double[::1] emf,
              const double[::1] delta, double[::1] re, double[::1] im, double[::1] out,
              Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef double ire, iim
    for i in range(n):
        re[i] = emf[i] * cos(delta[i])
        im[i] = emf[i] * sin(delta[i])
    for i in range(n):
        ire = 0.0
        iim = 0.0
        for j in range(n):
            ire += g[i, j] * re[j] - b[i, j] * im[j]
            iim += g[i, j] * im[j] + b[i, j] * re[j]
        out[i] = re[i] * ire + im[i] * iim


def electrical_power(g, b, emf, delta):
    cdef double[:, ::1] gv = np.ascontiguousarray(g, dtype=np.float64)
    cdef double[:, ::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    cdef double[::1] ev = np.ascontiguousarray(emf, dtype=np.float64)
    cdef double[::1] dv = np.ascontiguousarray(delta, dtype=np.float64)
    cdef Py_ssize_t n = ev.shape[0]
    out = np.empty(n)
    cdef double[::1] ov = out
    cdef double[::1] re = np.empty(n)
    cdef double[::1] im = np.empty(n)
    _pe(gv, bv, ev, dv, re, im, ov, n)
    return out


def sync_matrix(g, b, emf, delta):
    cdef double[:, ::1] gv = np.ascontiguousarray(g, dtype=np.float64)
    cdef double[:, ::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    cdef double[::1] ev = np.ascontiguousarray(emf, dtype=np.float64)
    cdef double[::1] dv = np.ascontiguousarray(delta, dtype=np.float64)
    cdef Py_ssize_t n = ev.shape[0], p, q
    cdef double dd
    k = np.zeros((n, n))
    cdef double[:, ::1] kv = k
    for p in range(n):
        for q in range(n):
            if p != q:
                dd = dv[p] - dv[q]
                kv[p, q] = ev[p] * ev[q] * (bv[p, q] * cos(dd) - gv[p, q] * sin(dd))
    return k


def rk4_steps(double[::1] delta, double[::1] omega, emf, g, b, pm, m, d,
              double ws, double dt, Py_ssize_t nsteps):
    cdef double[:, ::1] gv = np.ascontiguousarray(g, dtype=np.float64)
    cdef double[:, ::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    cdef double[::1] ev = np.ascontiguousarray(emf, dtype=np.float64)
    cdef double[::1] pmv = np.ascontiguousarray(pm, dtype=np.float64)
    cdef double[::1] mv = np.ascontiguousarray(m, dtype=np.float64)
    cdef double[::1] dampv = np.ascontiguousarray(d, dtype=np.float64)
    cdef Py_ssize_t n = delta.shape[0], i, s
    cdef double h2 = 0.5 * dt, h6 = dt / 6.0
    cdef double[::1] re = np.empty(n)
    cdef double[::1] im = np.empty(n)
    cdef double[::1] pe = np.empty(n)
    cdef double[::1] dtmp = np.empty(n)
    cdef double[::1] wtmp = np.empty(n)
    cdef double[::1] sd = np.empty(n)
    cdef double[::1] sw = np.empty(n)
    cdef double kd, kw
    cdef bint bad
    cdef Py_ssize_t failed = -1
    with nogil:
        for s in range(nsteps):
            # k1
            _pe(gv, bv, ev, delta, re, im, pe, n)
            for i in range(n):
                kd = ws * omega[i]
                kw = (pmv[i] - pe[i] - dampv[i] * omega[i]) / mv[i]
                sd[i] = kd
                sw[i] = kw
                dtmp[i] = delta[i] + h2 * kd
                wtmp[i] = omega[i] + h2 * kw
            # k2
            _pe(gv, bv, ev, dtmp, re, im, pe, n)
            for i in range(n):
                kd = ws * wtmp[i]
                kw = (pmv[i] - pe[i] - dampv[i] * wtmp[i]) / mv[i]
                sd[i] += 2.0 * kd
                sw[i] += 2.0 * kw
                dtmp[i] = delta[i] + h2 * kd
                wtmp[i] = omega[i] + h2 * kw
            # k3
            _pe(gv, bv, ev, dtmp, re, im, pe, n)
            for i in range(n):
                kd = ws * wtmp[i]
                kw = (pmv[i] - pe[i] - dampv[i] * wtmp[i]) / mv[i]
                sd[i] += 2.0 * kd
                sw[i] += 2.0 * kw
                dtmp[i] = delta[i] + dt * kd
                wtmp[i] = omega[i] + dt * kw
            # k4
            _pe(gv, bv, ev, dtmp, re, im, pe, n)
            bad = False
            for i in range(n):
                kd = ws * wtmp[i]
                kw = (pmv[i] - pe[i] - dampv[i] * wtmp[i]) / mv[i]
                delta[i] += h6 * (sd[i] + kd)
                omega[i] += h6 * (sw[i] + kw)
                if not (isfinite(delta[i]) and isfinite(omega[i])):
                    bad = True
            if bad:
                failed = s
                break
    return failed
