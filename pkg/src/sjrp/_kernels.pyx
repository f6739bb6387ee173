# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled per-path simulation loops for the benchmark policy families.

Every kernel walks ``demand[path, period, item]`` and writes discounted cost
components into ``out[path, :]`` as (fixed, variable, holding, backlog,
n_orders). Semantics match :mod:`sjrp._kernels_py` exactly.
"""
import numpy as np
cimport numpy as cnp

ctypedef cnp.int64_t i64


cdef inline void _charge_state(const i64* x, const double* h, const double* p, double w,
                               double* hold, double* back, Py_ssize_t d) noexcept nogil:
    cdef Py_ssize_t j
    for j in range(d):
        if x[j] >= 0:
            hold[0] += w * h[j] * x[j]
        else:
            back[0] -= w * p[j] * x[j]


def simulate_rs(const i64[:, :, ::1] demand, const i64[::1] x0, long R, const i64[::1] S,
                double c0, const double[::1] c, const double[::1] h, const double[::1] p,
                double gamma, double periods_per_year, double[:, ::1] out):
    cdef Py_ssize_t P = demand.shape[0], H = demand.shape[1], d = demand.shape[2]
    cdef Py_ssize_t i, n, j
    cdef i64[::1] x = np.empty(d, dtype=np.int64)
    cdef double disc, fixed, var, hold, back, norders, vcost, w = 1.0 / periods_per_year
    cdef i64 y, tot
    with nogil:
        for i in range(P):
            for j in range(d):
                x[j] = x0[j]
            disc = 1.0
            fixed = 0.0; var = 0.0; hold = 0.0; back = 0.0; norders = 0.0
            for n in range(H):
                if n % R == 0:
                    tot = 0
                    vcost = 0.0
                    for j in range(d):
                        y = S[j] - x[j]
                        if y > 0:
                            x[j] += y
                            tot += y
                            vcost += c[j] * y
                    if tot > 0:
                        fixed += disc * c0
                        var += disc * vcost
                        norders += 1.0
                for j in range(d):
                    x[j] -= demand[i, n, j]
                _charge_state(&x[0], &h[0], &p[0], disc * w, &hold, &back, d)
                disc *= gamma
            out[i, 0] = fixed; out[i, 1] = var; out[i, 2] = hold
            out[i, 3] = back; out[i, 4] = norders


def simulate_qs(const i64[:, :, ::1] demand, const i64[::1] x0, double Q, const i64[::1] S,
                double c0, const double[::1] c, const double[::1] h, const double[::1] p,
                double gamma, double periods_per_year, double[:, ::1] out):
    cdef Py_ssize_t P = demand.shape[0], H = demand.shape[1], d = demand.shape[2]
    cdef Py_ssize_t i, n, j
    cdef i64[::1] x = np.empty(d, dtype=np.int64)
    cdef double disc, fixed, var, hold, back, norders, vcost, w = 1.0 / periods_per_year
    cdef i64 y, tot, cum
    cdef bint fresh
    with nogil:
        for i in range(P):
            for j in range(d):
                x[j] = x0[j]
            disc = 1.0
            fixed = 0.0; var = 0.0; hold = 0.0; back = 0.0; norders = 0.0
            fresh = True
            cum = 0
            for n in range(H):
                if fresh or cum >= Q:
                    tot = 0
                    vcost = 0.0
                    for j in range(d):
                        y = S[j] - x[j]
                        if y > 0:
                            x[j] += y
                            tot += y
                            vcost += c[j] * y
                    if tot > 0:
                        fixed += disc * c0
                        var += disc * vcost
                        norders += 1.0
                        fresh = False
                        cum = 0
                for j in range(d):
                    x[j] -= demand[i, n, j]
                    cum += demand[i, n, j]
                _charge_state(&x[0], &h[0], &p[0], disc * w, &hold, &back, d)
                disc *= gamma
            out[i, 0] = fixed; out[i, 1] = var; out[i, 2] = hold
            out[i, 3] = back; out[i, 4] = norders


def simulate_can_order(const i64[:, :, ::1] demand, const i64[::1] x0, const i64[::1] s, const i64[::1] o,
                       const i64[::1] S, double c0, const double[::1] c, const double[::1] h,
                       const double[::1] p, double gamma, double periods_per_year,
                       double[:, ::1] out):
    cdef Py_ssize_t P = demand.shape[0], H = demand.shape[1], d = demand.shape[2]
    cdef Py_ssize_t i, n, j
    cdef i64[::1] x = np.empty(d, dtype=np.int64)
    cdef double disc, fixed, var, hold, back, norders, vcost, w = 1.0 / periods_per_year
    cdef i64 y, tot
    cdef bint trigger
    with nogil:
        for i in range(P):
            for j in range(d):
                x[j] = x0[j]
            disc = 1.0
            fixed = 0.0; var = 0.0; hold = 0.0; back = 0.0; norders = 0.0
            for n in range(H):
                trigger = False
                for j in range(d):
                    if x[j] <= s[j]:
                        trigger = True
                        break
                if trigger:
                    tot = 0
                    vcost = 0.0
                    for j in range(d):
                        if x[j] <= o[j]:
                            y = S[j] - x[j]
                            if y > 0:
                                x[j] += y
                                tot += y
                                vcost += c[j] * y
                    if tot > 0:
                        fixed += disc * c0
                        var += disc * vcost
                        norders += 1.0
                for j in range(d):
                    x[j] -= demand[i, n, j]
                _charge_state(&x[0], &h[0], &p[0], disc * w, &hold, &back, d)
                disc *= gamma
            out[i, 0] = fixed; out[i, 1] = var; out[i, 2] = hold
            out[i, 3] = back; out[i, 4] = norders


def simulate_table(const i64[:, :, ::1] demand, const i64[::1] x0, const i64[::1] lo, const i64[::1] hi,
                   const i64[::1] strides, const cnp.uint8_t[::1] order_flag, const i64[:, ::1] target,
                   double c0, const double[::1] c, const double[::1] h, const double[::1] p,
                   double gamma, double periods_per_year, double[:, ::1] out):
    """Lookup-table policy; states outside ``[lo, hi]`` use the clamped entry."""
    cdef Py_ssize_t P = demand.shape[0], H = demand.shape[1], d = demand.shape[2]
    cdef Py_ssize_t i, n, j, idx
    cdef i64[::1] x = np.empty(d, dtype=np.int64)
    cdef double disc, fixed, var, hold, back, norders, vcost, w = 1.0 / periods_per_year
    cdef i64 y, tot, xc
    with nogil:
        for i in range(P):
            for j in range(d):
                x[j] = x0[j]
            disc = 1.0
            fixed = 0.0; var = 0.0; hold = 0.0; back = 0.0; norders = 0.0
            for n in range(H):
                idx = 0
                for j in range(d):
                    xc = x[j]
                    if xc < lo[j]:
                        xc = lo[j]
                    elif xc > hi[j]:
                        xc = hi[j]
                    idx += (xc - lo[j]) * strides[j]
                if order_flag[idx]:
                    tot = 0
                    vcost = 0.0
                    for j in range(d):
                        y = target[idx, j] - x[j]
                        if y > 0:
                            x[j] += y
                            tot += y
                            vcost += c[j] * y
                    if tot > 0:
                        fixed += disc * c0
                        var += disc * vcost
                        norders += 1.0
                for j in range(d):
                    x[j] -= demand[i, n, j]
                _charge_state(&x[0], &h[0], &p[0], disc * w, &hold, &back, d)
                disc *= gamma
            out[i, 0] = fixed; out[i, 1] = var; out[i, 2] = hold
            out[i, 3] = back; out[i, 4] = norders
