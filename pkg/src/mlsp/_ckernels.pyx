# cython: language_level=3
"""Compiled counterparts of ``mlsp._pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint16_t, uint32_t, int64_t
from libc.string cimport memcpy

cnp.import_array()

HALF_MAX = 65504.0


cdef inline int64_t _overlap(int64_t lo0, int64_t hi0, int64_t lo1, int64_t hi1) nogil:
    cdef int64_t lo = lo0 if lo0 > lo1 else lo1
    cdef int64_t hi = hi0 if hi0 < hi1 else hi1
    return hi - lo if hi > lo else 0


def area_resize(block, Py_ssize_t out_h, Py_ssize_t out_w):
    cdef const double[:, :, ::1] x = np.ascontiguousarray(block, dtype=np.float64)
    cdef Py_ssize_t h = x.shape[0], w = x.shape[1], c = x.shape[2]
    out = np.empty((out_h, out_w, c), dtype=np.float32)
    cdef float[:, :, ::1] y = out
    cdef double[::1] acc = np.empty(c, dtype=np.float64)
    cdef Py_ssize_t i, j, p, q, k, p0, p1, q0, q1
    cdef double wgt, norm = <double>(h * w)
    cdef int64_t oh
    with nogil:
        for i in range(out_h):
            p0 = (i * h) // out_h
            p1 = ((i + 1) * h + out_h - 1) // out_h
            for j in range(out_w):
                q0 = (j * w) // out_w
                q1 = ((j + 1) * w + out_w - 1) // out_w
                for k in range(c):
                    acc[k] = 0.0
                for p in range(p0, p1):
                    oh = _overlap(i * h, (i + 1) * h, p * out_h, (p + 1) * out_h)
                    if oh == 0:
                        continue
                    for q in range(q0, q1):
                        wgt = <double>(oh * _overlap(j * w, (j + 1) * w, q * out_w, (q + 1) * out_w))
                        if wgt == 0.0:
                            continue
                        for k in range(c):
                            acc[k] += wgt * x[p, q, k]
                for k in range(c):
                    y[i, j, k] = <float>(acc[k] / norm)
    return out


# Bit 16 of the result flags a value clamped to the largest finite half.
cdef inline uint32_t _f32_to_f16(uint32_t f) nogil:
    cdef uint32_t sign = (f >> 16) & 0x8000
    cdef uint32_t exp = (f >> 23) & 0xff
    cdef uint32_t man = f & 0x7fffff
    cdef int e
    cdef uint32_t half, rem, shift, halfway
    if exp == 0xff:
        if man != 0:
            return sign | 0x7e00 | (man >> 13)
        return 0x10000 | sign | 0x7bff
    e = <int>exp - 112
    if e >= 31:
        return 0x10000 | sign | 0x7bff
    if e <= 0:
        if e < -10:
            return sign
        man = man | 0x800000
        shift = <uint32_t>(14 - e)
        half = man >> shift
        rem = man & ((1u << shift) - 1)
        halfway = 1u << (shift - 1)
        if rem > halfway or (rem == halfway and (half & 1)):
            half += 1
        return sign | half
    half = (<uint32_t>e << 10) | (man >> 13)
    rem = man & 0x1fff
    if rem > 0x1000 or (rem == 0x1000 and (half & 1)):
        half += 1
    if half >= 0x7c00:
        return 0x10000 | sign | 0x7bff
    return sign | half


cdef inline uint32_t _f16_to_f32(uint16_t h) nogil:
    cdef uint32_t sign = (<uint32_t>(h & 0x8000)) << 16
    cdef uint32_t exp = (h >> 10) & 0x1f
    cdef uint32_t man = h & 0x3ff
    if exp == 0:
        if man == 0:
            return sign
        exp = 113
        while (man & 0x400) == 0:
            man <<= 1
            exp -= 1
        man &= 0x3ff
        return sign | (exp << 23) | (man << 13)
    if exp == 0x1f:
        return sign | 0x7f800000 | (man << 13)
    return sign | ((exp + 112) << 23) | (man << 13)


def fp16_encode(values):
    src = np.ascontiguousarray(values, dtype=np.float32).reshape(-1)
    cdef const uint32_t[::1] bits = src.view(np.uint32)
    out = np.empty(src.shape[0], dtype=np.uint16)
    cdef uint16_t[::1] dst = out
    cdef Py_ssize_t i, n = bits.shape[0], n_over = 0
    cdef uint32_t r
    with nogil:
        for i in range(n):
            r = _f32_to_f16(bits[i])
            n_over += r >> 16
            dst[i] = <uint16_t>r
    return out.reshape(np.shape(values)), int(n_over)


def fp16_decode(bits):
    src = np.ascontiguousarray(bits, dtype=np.uint16).reshape(-1)
    cdef const uint16_t[::1] h = src
    out = np.empty(src.shape[0], dtype=np.uint32)
    cdef uint32_t[::1] dst = out
    cdef Py_ssize_t i, n = h.shape[0]
    with nogil:
        for i in range(n):
            dst[i] = _f16_to_f32(h[i])
    return out.view(np.float32).reshape(np.shape(bits))


def cell_means(planes, int factor):
    cdef const double[:, :, ::1] x = np.ascontiguousarray(planes, dtype=np.float64)
    cdef Py_ssize_t h = x.shape[0], w = x.shape[1], k = x.shape[2]
    cdef Py_ssize_t oh = (h + factor - 1) // factor, ow = (w + factor - 1) // factor
    out = np.zeros((oh, ow, k), dtype=np.float64)
    cdef double[:, :, ::1] y = out
    cdef Py_ssize_t p, q, c, i, j, nr, nc
    with nogil:
        for p in range(h):
            i = p // factor
            for q in range(w):
                j = q // factor
                for c in range(k):
                    y[i, j, c] += x[p, q, c]
        for i in range(oh):
            nr = h - i * factor
            if nr > factor:
                nr = factor
            for j in range(ow):
                nc = w - j * factor
                if nc > factor:
                    nc = factor
                for c in range(k):
                    y[i, j, c] /= <double>(nr * nc)
    return out
