# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: alternating two-way demeaning on an unbalanced
observation list.  Semantics match panelcf._kernels_py exactly."""

import numpy as np

cimport numpy as cnp

cnp.import_array()

HAVE_COMPILED = True


def alternating_demean(double[::1] values, long long[::1] rows,
                       long long[::1] cols, Py_ssize_t n_rows,
                       Py_ssize_t n_cols, double tol, int max_iter,
                       a=None, x=None):
    """See panelcf._kernels_py.alternating_demean."""
    cdef Py_ssize_t n_obs = values.shape[0]
    a_arr = np.zeros(n_rows) if a is None else np.ascontiguousarray(a, dtype=np.float64)
    x_arr = np.zeros(n_cols) if x is None else np.ascontiguousarray(x, dtype=np.float64)
    cdef double[::1] av = a_arr
    cdef double[::1] xv = x_arr
    cdef double[::1] sums_r = np.zeros(n_rows)
    cdef double[::1] sums_c = np.zeros(n_cols)
    cdef long long[::1] cnt_r = np.zeros(n_rows, dtype=np.int64)
    cdef long long[::1] cnt_c = np.zeros(n_cols, dtype=np.int64)

    cdef Py_ssize_t j, i
    cdef int it = 0
    cdef double delta = np.inf
    cdef double new_val, d

    for j in range(n_obs):
        cnt_r[rows[j]] += 1
        cnt_c[cols[j]] += 1

    while it < max_iter:
        it += 1
        delta = 0.0

        for i in range(n_rows):
            sums_r[i] = 0.0
        for j in range(n_obs):
            sums_r[rows[j]] += values[j] - xv[cols[j]]
        for i in range(n_rows):
            if cnt_r[i] > 0:
                new_val = sums_r[i] / cnt_r[i]
                d = new_val - av[i]
                if d < 0:
                    d = -d
                if d > delta:
                    delta = d
                av[i] = new_val

        for i in range(n_cols):
            sums_c[i] = 0.0
        for j in range(n_obs):
            sums_c[cols[j]] += values[j] - av[rows[j]]
        for i in range(n_cols):
            if cnt_c[i] > 0:
                new_val = sums_c[i] / cnt_c[i]
                d = new_val - xv[i]
                if d < 0:
                    d = -d
                if d > delta:
                    delta = d
                xv[i] = new_val

        if delta < tol:
            break

    return a_arr, x_arr, it, delta < tol
