# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled subset least-squares kernel (same algorithm as _kernels_py)."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt
from libc.stdlib cimport malloc, free

cnp.import_array()

DEF_TOL = 1e-10


def subset_residual_norms(Z, y, combos):
    cdef double[:, ::1] Zv = np.ascontiguousarray(Z, dtype=np.float64)
    cdef double[::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    cdef long long[:, ::1] cv = np.ascontiguousarray(combos, dtype=np.int64)
    cdef Py_ssize_t B = cv.shape[0]
    cdef Py_ssize_t t = cv.shape[1]
    cdef Py_ssize_t N = yv.shape[0]
    norms_arr = np.empty(B, dtype=np.float64)
    deg_arr = np.zeros(B, dtype=np.bool_)
    cdef double[::1] norms = norms_arr
    cdef cnp.npy_bool[::1] deg = deg_arr
    cdef double tol = DEF_TOL
    cdef double ynorm = 0.0
    cdef Py_ssize_t b, i, j, n
    cdef double dot, nv
    cdef bint bad
    for n in range(N):
        ynorm += yv[n] * yv[n]
    ynorm = sqrt(ynorm)
    if t == 0:
        norms_arr[:] = ynorm
        return norms_arr, deg_arr
    cdef double* Q = <double*> malloc(t * N * sizeof(double))
    cdef double* r = <double*> malloc(N * sizeof(double))
    if Q == NULL or r == NULL:
        free(Q)
        free(r)
        raise MemoryError()
    try:
        with nogil:
            for b in range(B):
                bad = False
                for n in range(N):
                    r[n] = yv[n]
                for j in range(t):
                    for n in range(N):
                        Q[j * N + n] = Zv[cv[b, j], n]
                    for i in range(j):
                        dot = 0.0
                        for n in range(N):
                            dot = dot + Q[i * N + n] * Q[j * N + n]
                        for n in range(N):
                            Q[j * N + n] = Q[j * N + n] - dot * Q[i * N + n]
                    nv = 0.0
                    for n in range(N):
                        nv = nv + Q[j * N + n] * Q[j * N + n]
                    nv = sqrt(nv)
                    if nv < tol:
                        bad = True
                        nv = 1.0
                    for n in range(N):
                        Q[j * N + n] = Q[j * N + n] / nv
                    dot = 0.0
                    for n in range(N):
                        dot = dot + Q[j * N + n] * r[n]
                    for n in range(N):
                        r[n] = r[n] - dot * Q[j * N + n]
                if bad:
                    norms[b] = ynorm
                    deg[b] = True
                else:
                    nv = 0.0
                    for n in range(N):
                        nv = nv + r[n] * r[n]
                    norms[b] = sqrt(nv)
    finally:
        free(Q)
        free(r)
    return norms_arr, deg_arr
