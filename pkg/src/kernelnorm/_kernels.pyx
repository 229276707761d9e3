# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled sliding-window kernels (im2col/col2im and window moments)."""
import numpy as np
cimport numpy as cnp
from libc.string cimport memcpy

cnp.import_array()

ctypedef fused real:
    float
    double


def im2col(const real[:, :, :, ::1] xp, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t sh, Py_ssize_t sw):
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1], hp = xp.shape[2], wp = xp.shape[3]
    cdef Py_ssize_t oh = (hp - kh) // sh + 1, ow = (wp - kw) // sw + 1
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n, c * kh * kw, oh * ow), dtype=dtype)
    cdef real[:, :, ::1] cols = out
    cdef Py_ssize_t i, ch, a, b, r, q, row, y
    cdef real* dst
    cdef const real* src
    for i in range(n):
        for ch in range(c):
            for a in range(kh):
                for b in range(kw):
                    row = (ch * kh + a) * kw + b
                    for r in range(oh):
                        y = r * sh + a
                        dst = &cols[i, row, r * ow]
                        src = &xp[i, ch, y, b]
                        if sw == 1:
                            memcpy(dst, src, ow * sizeof(real))
                        else:
                            for q in range(ow):
                                dst[q] = src[q * sw]
    return out


def col2im(const real[:, :, ::1] cols, tuple shape, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t sh, Py_ssize_t sw):
    cdef Py_ssize_t n = shape[0], c = shape[1], hp = shape[2], wp = shape[3]
    cdef Py_ssize_t oh = (hp - kh) // sh + 1, ow = (wp - kw) // sw + 1
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n, c, hp, wp), dtype=dtype)
    cdef real[:, :, :, ::1] xp = out
    cdef Py_ssize_t i, ch, a, b, r, q, row, y
    for i in range(n):
        for ch in range(c):
            for a in range(kh):
                for b in range(kw):
                    row = (ch * kh + a) * kw + b
                    for r in range(oh):
                        y = r * sh + a
                        for q in range(ow):
                            xp[i, ch, y, q * sw + b] += cols[i, row, r * ow + q]
    return out


def window_moments(const real[:, :, :, ::1] xp, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t sh, Py_ssize_t sw):
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1], hp = xp.shape[2], wp = xp.shape[3]
    cdef Py_ssize_t oh = (hp - kh) // sh + 1, ow = (wp - kw) // sw + 1
    plane1_arr = np.zeros((hp, wp))
    plane2_arr = np.zeros((hp, wp))
    s1_arr = np.zeros((n, oh, ow))
    s2_arr = np.zeros((n, oh, ow))
    cdef double[:, ::1] plane1 = plane1_arr, plane2 = plane2_arr
    cdef double[:, :, ::1] s1 = s1_arr, s2 = s2_arr
    cdef Py_ssize_t i, ch, y, x, a, b, r, q
    cdef double v, acc1, acc2
    for i in range(n):
        plane1[:, :] = 0.0
        plane2[:, :] = 0.0
        for ch in range(c):
            for y in range(hp):
                for x in range(wp):
                    v = xp[i, ch, y, x]
                    plane1[y, x] += v
                    plane2[y, x] += v * v
        for r in range(oh):
            for q in range(ow):
                acc1 = 0.0
                acc2 = 0.0
                for a in range(kh):
                    for b in range(kw):
                        acc1 += plane1[r * sh + a, q * sw + b]
                        acc2 += plane2[r * sh + a, q * sw + b]
                s1[i, r, q] = acc1
                s2[i, r, q] = acc2
    return s1_arr, s2_arr


def window_moments_grad(const double[:, :, ::1] g1, const double[:, :, ::1] g2,
                        const real[:, :, :, ::1] xp,
                        Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t sh, Py_ssize_t sw):
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1], hp = xp.shape[2], wp = xp.shape[3]
    cdef Py_ssize_t oh = g1.shape[1], ow = g1.shape[2]
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n, c, hp, wp), dtype=dtype)
    cdef real[:, :, :, ::1] grad = out
    plane1_arr = np.zeros((hp, wp))
    plane2_arr = np.zeros((hp, wp))
    cdef double[:, ::1] plane1 = plane1_arr, plane2 = plane2_arr
    cdef Py_ssize_t i, ch, y, x, a, b, r, q
    for i in range(n):
        plane1[:, :] = 0.0
        plane2[:, :] = 0.0
        for r in range(oh):
            for q in range(ow):
                for a in range(kh):
                    for b in range(kw):
                        plane1[r * sh + a, q * sw + b] += g1[i, r, q]
                        plane2[r * sh + a, q * sw + b] += g2[i, r, q]
        for ch in range(c):
            for y in range(hp):
                for x in range(wp):
                    grad[i, ch, y, x] = <real>(plane1[y, x] + 2.0 * xp[i, ch, y, x] * plane2[y, x])
    return out
