# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-row quantization and moment kernels.

Every routine here has a numpy twin in ``_pykernels`` with identical
semantics; the fake-quant kernels agree bitwise with it.
"""
import numpy as np

cimport numpy as cnp
from libc.math cimport round, NAN

cnp.import_array()


def round_half_away(const double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(n):
            for j in range(m):
                o[i, j] = round(x[i, j])
    return out


def quantize_rows(const double[:, ::1] x, const double[::1] scale,
                  const double[::1] zero, const double[::1] qmax):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    cdef double s, z, hi, q
    out = np.empty((n, m), dtype=np.int64)
    cdef long long[:, ::1] o = out
    with nogil:
        for i in range(n):
            s = scale[i]
            z = zero[i]
            hi = qmax[i]
            for j in range(m):
                q = round(x[i, j] / s) + z
                if q < 0.0:
                    q = 0.0
                elif q > hi:
                    q = hi
                o[i, j] = <long long>q
    return out


def fake_quant_rows(const double[:, ::1] x, const double[::1] scale,
                    const double[::1] zero, const double[::1] qmax):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    cdef double s, z, hi, q
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(n):
            s = scale[i]
            z = zero[i]
            hi = qmax[i]
            for j in range(m):
                q = round(x[i, j] / s) + z
                if q < 0.0:
                    q = 0.0
                elif q > hi:
                    q = hi
                o[i, j] = (q - z) * s
    return out


def fake_quant_rows_ste(const double[:, ::1] x, const double[::1] scale,
                        const double[::1] zero, const double[::1] qmax):
    """Fake-quant plus the straight-through backward terms.

    Returns ``(out, mask, dscale)``: ``mask`` is 1 where the input lies
    in the clip range, ``dscale`` is d(out)/d(scale) under the learned-step rule.
    """
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    cdef double s, z, hi, v, r, q
    out = np.empty((n, m), dtype=np.float64)
    mask = np.empty((n, m), dtype=np.uint8)
    dscale = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef cnp.uint8_t[:, ::1] mk = mask
    cdef double[:, ::1] ds = dscale
    with nogil:
        for i in range(n):
            s = scale[i]
            z = zero[i]
            hi = qmax[i]
            for j in range(m):
                v = x[i, j] / s
                r = round(v)
                q = r + z
                if q < 0.0:
                    q = 0.0
                elif q > hi:
                    q = hi
                o[i, j] = (q - z) * s
                # clip test on the unrounded value: identity exactly on [lower, upper]
                if v + z < 0.0:
                    mk[i, j] = 0
                    ds[i, j] = -z
                elif v + z > hi:
                    mk[i, j] = 0
                    ds[i, j] = hi - z
                else:
                    mk[i, j] = 1
                    ds[i, j] = r - v
    return out, mask, dscale


def kurtosis_rows(const double[:, ::1] x):
    """Pearson kurtosis m4/m2^2 of each row; NaN for constant rows."""
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    cdef double acc, mean, d, d2, m2, m4, lo, hi
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            acc = 0.0
            lo = x[i, 0]
            hi = x[i, 0]
            for j in range(m):
                acc = acc + x[i, j]
                if x[i, j] < lo:
                    lo = x[i, j]
                if x[i, j] > hi:
                    hi = x[i, j]
            if lo == hi:
                o[i] = NAN
                continue
            mean = acc / m
            m2 = 0.0
            m4 = 0.0
            for j in range(m):
                d = x[i, j] - mean
                d2 = d * d
                m2 = m2 + d2
                m4 = m4 + d2 * d2
            m2 = m2 / m
            m4 = m4 / m
            o[i] = m4 / (m2 * m2)
    return out
