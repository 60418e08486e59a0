# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled swing-equation kernels (batched explicit Euler)."""
import numpy as np

cimport numpy as cnp
from libc.math cimport sin, cos

cnp.import_array()


def electric_power(const double[:, ::1] theta, const double[:, ::1] susceptance):
    cdef Py_ssize_t nb = theta.shape[0], n = theta.shape[1]
    cdef Py_ssize_t b, i, j
    cdef double acc, ti
    out = np.zeros((nb, n), dtype=np.float64)
    cdef double[:, ::1] pe = out
    for b in range(nb):
        for i in range(n):
            acc = 0.0
            ti = theta[b, i]
            for j in range(n):
                if j != i:
                    acc += susceptance[i, j] * sin(ti - theta[b, j])
            pe[b, i] = acc
    return out


def euler_window(
    const double[:, ::1] theta0,
    const double[:, ::1] omega0,
    const double[::1] inv_mass,
    const double[::1] damping,
    const double[::1] injection,
    const double[:, ::1] susceptance,
    const double[:, :, ::1] droop,
    double dt,
):
    cdef Py_ssize_t steps = droop.shape[0], nb = theta0.shape[0], n = theta0.shape[1]
    cdef Py_ssize_t s, b, i, j
    cdef double sc, cs, pe, w
    thetas = np.empty((steps, nb, n), dtype=np.float64)
    omegas = np.empty((steps, nb, n), dtype=np.float64)
    cdef double[:, :, ::1] th = thetas
    cdef double[:, :, ::1] om = omegas
    # numpy's vectorized sin/cos beat scalar libm calls, so the trig for the
    # whole batch is one ufunc call per step and only the coupling is looped
    sin_buf = np.empty((nb, n))
    cos_buf = np.empty((nb, n))
    cdef double[:, ::1] sn = sin_buf
    cdef double[:, ::1] cn = cos_buf
    cdef const double[:, ::1] th_prev = theta0
    cdef const double[:, ::1] om_prev = omega0
    for s in range(steps):
        np.sin(th_prev, out=sin_buf)
        np.cos(th_prev, out=cos_buf)
        for b in range(nb):
            for i in range(n):
                sc = 0.0
                cs = 0.0
                for j in range(n):
                    sc += susceptance[i, j] * cn[b, j]
                    cs += susceptance[i, j] * sn[b, j]
                pe = sn[b, i] * sc - cn[b, i] * cs
                w = om_prev[b, i]
                th[s, b, i] = th_prev[b, i] + dt * w
                om[s, b, i] = w + dt * inv_mass[i] * (injection[i] - pe - damping[i] * w - droop[s, b, i] * w)
        th_prev = th[s]
        om_prev = om[s]
    return thetas, omegas
