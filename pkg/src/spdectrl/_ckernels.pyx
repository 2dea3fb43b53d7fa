# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled forward-integration kernel; semantics match ``_pykernels``."""

import numpy as np

cimport numpy as cnp
from libc.math cimport tanh

cnp.import_array()

BACKEND_NAME = "c"


cdef void _step_all_paths(
    double[:, :, ::1] mats, bint scheme_implicit,
    double[::1] x0,
    double[::1] a_tab, double[:, ::1] b_tab, double[:, ::1] s_tab,
    double[:, :, ::1] g_tab, double[:, ::1] ell_tab, double[::1] g_term,
    double dt,
    double[:, :, ::1] dw, double[:, :, ::1] dm,
    double[::1] fac_w, bint use_factor,
    double amp_a, double amp_b, double amp_s, double amp_g,
    bint store_states, bint with_cost,
    double[:, :, ::1] states, double[::1] cost,
    double[::1] x, double[::1] rhs, double[::1] wcum,
) nogil:
    cdef Py_ssize_t P = dm.shape[0]
    cdef Py_ssize_t L = dm.shape[1]
    cdef Py_ssize_t n = dm.shape[2]
    cdef Py_ssize_t p, k, i, j
    cdef double f, ma, mb, ms, mg, sdot, acc, c

    for p in range(P):
        for i in range(n):
            x[i] = x0[i]
            wcum[i] = 0.0
        if store_states:
            for i in range(n):
                states[p, 0, i] = x[i]
        c = 0.0
        for k in range(L):
            if use_factor:
                f = 0.0
                for i in range(n):
                    f += fac_w[i] * wcum[i]
                f = tanh(f)
                ma = 1.0 + amp_a * f
                mb = 1.0 + amp_b * f
                ms = 1.0 + amp_s * f
                mg = 1.0 + amp_g * f
            else:
                ma = mb = ms = mg = 1.0
            sdot = 0.0
            for i in range(n):
                sdot += s_tab[k, i] * x[i]
            sdot *= ms
            if with_cost:
                for i in range(n):
                    c += dt * ell_tab[k, i] * x[i]
            for i in range(n):
                acc = 0.0
                for j in range(n):
                    acc += g_tab[k, i, j] * dm[p, k, j]
                rhs[i] = x[i] + dt * (a_tab[k] * ma * x[i] + mb * b_tab[k, i]) \
                    + sdot * dm[p, k, i] + mg * acc
            if scheme_implicit:
                for i in range(n):
                    acc = 0.0
                    for j in range(n):
                        acc += mats[k, i, j] * rhs[j]
                    x[i] = acc
            else:
                for i in range(n):
                    acc = 0.0
                    for j in range(n):
                        acc += mats[k, i, j] * x[j]
                    rhs[i] += dt * acc
                for i in range(n):
                    x[i] = rhs[i]
            if store_states:
                for i in range(n):
                    states[p, k + 1, i] = x[i]
            if use_factor:
                for i in range(n):
                    wcum[i] += dw[p, k, i]
        if with_cost:
            for i in range(n):
                c += g_term[i] * x[i]
            cost[p] = c


def forward_tables(mats, scheme_implicit, x0, a_tab, b_tab, s_tab, g_tab,
                   ell_tab, g_term, dt, dw, dm, fac_w, amps,
                   store_states, with_cost):
    cdef Py_ssize_t P = dm.shape[0]
    cdef Py_ssize_t L = dm.shape[1]
    cdef Py_ssize_t n = dm.shape[2]

    mats = np.ascontiguousarray(mats, dtype=np.float64)
    x0 = np.ascontiguousarray(x0, dtype=np.float64)
    a_tab = np.ascontiguousarray(a_tab, dtype=np.float64)
    b_tab = np.ascontiguousarray(b_tab, dtype=np.float64)
    s_tab = np.ascontiguousarray(s_tab, dtype=np.float64)
    g_tab = np.ascontiguousarray(g_tab, dtype=np.float64)
    ell_tab = np.ascontiguousarray(ell_tab, dtype=np.float64)
    g_term = np.ascontiguousarray(g_term, dtype=np.float64)
    dm = np.ascontiguousarray(dm, dtype=np.float64)

    use_factor = fac_w is not None
    if use_factor:
        fac_arr = np.ascontiguousarray(fac_w, dtype=np.float64)
        dw_arr = np.ascontiguousarray(dw, dtype=np.float64)
    else:
        fac_arr = np.zeros(n)
        dw_arr = np.zeros((1, 1, n)) if dw is None else np.ascontiguousarray(dw, dtype=np.float64)
        if dw_arr.shape[0] != P or dw_arr.shape[1] != L:
            dw_arr = np.zeros((P, L, n))

    states = np.empty((P, L + 1, n)) if store_states else np.zeros((1, 1, n))
    cost = np.zeros(P) if with_cost else np.zeros(1)
    x = np.empty(n)
    rhs = np.empty(n)
    wcum = np.empty(n)
    amp_a, amp_b, amp_s, amp_g = (float(a) for a in amps)

    _step_all_paths(mats, bool(scheme_implicit), x0, a_tab, b_tab, s_tab, g_tab,
                    ell_tab, g_term, float(dt), dw_arr, dm, fac_arr, use_factor,
                    amp_a, amp_b, amp_s, amp_g,
                    bool(store_states), bool(with_cost), states, cost, x, rhs, wcum)
    return (states if store_states else None), (cost if with_cost else None)
