# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled counterparts of ``_pykernels``; results are bit-identical."""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint8_t, uint64_t, int64_t

cnp.import_array()


def nearest(x, c):
    cdef const double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[:, ::1] cv = np.ascontiguousarray(c, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], v = xv.shape[1], k = cv.shape[0]
    idx = np.empty(n, dtype=np.int64)
    best = np.empty(n, dtype=np.float64)
    cdef int64_t[::1] iv = idx
    cdef double[::1] bv = best
    cdef Py_ssize_t i, j, m, arg
    cdef double d, diff, dmin
    with nogil:
        for i in range(n):
            arg = 0
            dmin = 0.0
            for m in range(k):
                d = 0.0
                for j in range(v):
                    diff = xv[i, j] - cv[m, j]
                    d = d + diff * diff
                if m == 0 or d < dmin:
                    dmin = d
                    arg = m
            iv[i] = arg
            bv[i] = dmin
    return idx, best


def pack(indices, int bitwidth):
    cdef const uint64_t[::1] src = np.ascontiguousarray(indices, dtype=np.uint64)
    cdef Py_ssize_t count = src.shape[0]
    cdef Py_ssize_t nbytes = (count * bitwidth + 7) // 8
    out = np.zeros(nbytes, dtype=np.uint8)
    cdef uint8_t[::1] ov = out
    cdef uint64_t acc = 0
    cdef int nbits = 0
    cdef Py_ssize_t i, pos = 0
    with nogil:
        for i in range(count):
            acc |= src[i] << nbits
            nbits += bitwidth
            while nbits >= 8:
                ov[pos] = <uint8_t>(acc & 0xFF)
                pos += 1
                acc >>= 8
                nbits -= 8
        if nbits > 0:
            ov[pos] = <uint8_t>(acc & 0xFF)
    return out.tobytes()


def unpack(data, int bitwidth, Py_ssize_t count):
    cdef const uint8_t[::1] src = np.frombuffer(data, dtype=np.uint8)
    cdef Py_ssize_t nbytes = src.shape[0]
    values = np.empty(count, dtype=np.int64)
    cdef int64_t[::1] vv = values
    cdef uint64_t acc = 0
    cdef uint64_t mask = (<uint64_t>1 << bitwidth) - 1
    cdef int nbits = 0
    cdef Py_ssize_t i, pos = 0
    with nogil:
        for i in range(count):
            while nbits < bitwidth:
                acc |= (<uint64_t>src[pos]) << nbits
                pos += 1
                nbits += 8
            vv[i] = <int64_t>(acc & mask)
            acc >>= bitwidth
            nbits -= bitwidth
    clean = acc == 0
    while clean and pos < nbytes:
        clean = src[pos] == 0
        pos += 1
    return values, clean
