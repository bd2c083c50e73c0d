# cython: boundscheck=False, wraparound=False, cdivision=True
"""Streaming phase-sum kernels for characteristic-function grids.

For a uniform frequency grid xi_j = xi0 + j*dxi the complex exponentials are
advanced by a per-observation recurrence (one sincos pair per observation,
one complex multiply per node), which avoids materializing the n-by-m phase
matrix and is the hot loop of every characteristic-function evaluation.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport cos, sin

cnp.import_array()


def phase_sums(double[::1] y, double[::1] w0, w1, double xi0, double dxi, Py_ssize_t m):
    """Return S_k[j] = sum_i w_k[i] * exp(1j*(xi0 + j*dxi)*y[i]).

    ``w1`` may be None, in which case only the first sum is computed and the
    second return value is None.
    """
    cdef Py_ssize_t n = y.shape[0]
    cdef bint has_w1 = w1 is not None
    cdef double[::1] w1v
    if has_w1:
        w1v = w1
    cdef cnp.ndarray s0re_a = np.zeros(m, dtype=np.float64)
    cdef cnp.ndarray s0im_a = np.zeros(m, dtype=np.float64)
    cdef cnp.ndarray s1re_a = np.zeros(m, dtype=np.float64)
    cdef cnp.ndarray s1im_a = np.zeros(m, dtype=np.float64)
    cdef double[::1] s0re = s0re_a
    cdef double[::1] s0im = s0im_a
    cdef double[::1] s1re = s1re_a
    cdef double[::1] s1im = s1im_a
    cdef Py_ssize_t i, j
    cdef double yi, a0, b0, cre, cim, dre, dim, tmp, wa, wb

    for i in range(n):
        yi = y[i]
        wa = w0[i]
        wb = w1v[i] if has_w1 else 0.0
        if wa == 0.0 and wb == 0.0:
            continue
        # current phase exp(1j*xi0*yi) and step exp(1j*dxi*yi)
        cre = cos(xi0 * yi)
        cim = sin(xi0 * yi)
        dre = cos(dxi * yi)
        dim = sin(dxi * yi)
        for j in range(m):
            s0re[j] += wa * cre
            s0im[j] += wa * cim
            if has_w1:
                s1re[j] += wb * cre
                s1im[j] += wb * cim
            tmp = cre * dre - cim * dim
            cim = cre * dim + cim * dre
            cre = tmp

    out0 = s0re_a + 1j * s0im_a
    out1 = (s1re_a + 1j * s1im_a) if has_w1 else None
    return out0, out1
