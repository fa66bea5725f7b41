# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled spherical-harmonic acceleration kernel (same contract as the numpy one)."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt
from libc.stdlib cimport malloc, free

cnp.import_array()


def sh_accel_body(pos, mu, double ref_radius, C, S):
    cdef const double[:, ::1] p = np.ascontiguousarray(pos, dtype=np.float64)
    cdef const double[::1] mus = np.ascontiguousarray(mu, dtype=np.float64)
    cdef const double[:, :, ::1] Cv = np.ascontiguousarray(C, dtype=np.float64)
    cdef const double[:, :, ::1] Sv = np.ascontiguousarray(S, dtype=np.float64)
    cdef Py_ssize_t K = p.shape[0]
    cdef int n_max = Cv.shape[1] - 1
    cdef int size = n_max + 2
    cdef int ld = size + 1
    out_arr = np.zeros((K, 3), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double *V = <double *> malloc(ld * ld * sizeof(double))
    cdef double *W = <double *> malloc(ld * ld * sizeof(double))
    if V == NULL or W == NULL:
        free(V)
        free(W)
        raise MemoryError()
    cdef Py_ssize_t k
    cdef int n, m, i
    cdef double x, y, z, r2, R, rho, x0, y0, z0, ax, ay, az, c, s, fac, scale
    R = ref_radius
    try:
        with nogil:
            for k in range(K):
                x = p[k, 0]
                y = p[k, 1]
                z = p[k, 2]
                r2 = x * x + y * y + z * z
                rho = R * R / r2
                x0 = R * x / r2
                y0 = R * y / r2
                z0 = R * z / r2
                for i in range(ld * ld):
                    V[i] = 0.0
                    W[i] = 0.0
                V[0] = R / sqrt(r2)
                for m in range(size):
                    if m > 0:
                        V[m * ld + m] = (2 * m - 1) * (x0 * V[(m - 1) * ld + m - 1] - y0 * W[(m - 1) * ld + m - 1])
                        W[m * ld + m] = (2 * m - 1) * (x0 * W[(m - 1) * ld + m - 1] + y0 * V[(m - 1) * ld + m - 1])
                    if m + 1 < size:
                        V[(m + 1) * ld + m] = (2 * m + 1) * z0 * V[m * ld + m]
                        W[(m + 1) * ld + m] = (2 * m + 1) * z0 * W[m * ld + m]
                    for n in range(m + 2, size):
                        V[n * ld + m] = ((2 * n - 1) * z0 * V[(n - 1) * ld + m] - (n + m - 1) * rho * V[(n - 2) * ld + m]) / (n - m)
                        W[n * ld + m] = ((2 * n - 1) * z0 * W[(n - 1) * ld + m] - (n + m - 1) * rho * W[(n - 2) * ld + m]) / (n - m)
                ax = 0.0
                ay = 0.0
                az = 0.0
                for n in range(n_max + 1):
                    c = Cv[k, n, 0]
                    ax = ax - c * V[(n + 1) * ld + 1]
                    ay = ay - c * W[(n + 1) * ld + 1]
                    az = az + (n + 1) * (-c * V[(n + 1) * ld])
                    for m in range(1, n + 1):
                        c = Cv[k, n, m]
                        s = Sv[k, n, m]
                        fac = 0.5 * (n - m + 1) * (n - m + 2)
                        ax = ax + 0.5 * (-c * V[(n + 1) * ld + m + 1] - s * W[(n + 1) * ld + m + 1]) + fac * (
                            c * V[(n + 1) * ld + m - 1] + s * W[(n + 1) * ld + m - 1])
                        ay = ay + 0.5 * (-c * W[(n + 1) * ld + m + 1] + s * V[(n + 1) * ld + m + 1]) + fac * (
                            -c * W[(n + 1) * ld + m - 1] + s * V[(n + 1) * ld + m - 1])
                        az = az + (n - m + 1) * (-c * V[(n + 1) * ld + m] - s * W[(n + 1) * ld + m])
                scale = mus[k] / (R * R)
                out[k, 0] = ax * scale
                out[k, 1] = ay * scale
                out[k, 2] = az * scale
    finally:
        free(V)
        free(W)
    return out_arr
