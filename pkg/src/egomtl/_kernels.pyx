# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled volume <-> column kernels backing conv3d.

Column layout is ``[B, C*kt*kh*kw, To*Ho*Wo]`` with the row index running
(c, kt, kh, kw) and the column index running (to, ho, wo). ``col2vol``
accumulates kernel offsets in the same (kt, kh, kw) order as the NumPy
fallback so both backends agree bitwise.
"""
import numpy as np

ctypedef fused real:
    float
    double


def _out_extent(int size, int k, int s, int p):
    return (size + 2 * p - k) // s + 1


def vol2col(real[:, :, :, :, ::1] x, int kt, int kh, int kw,
            int st, int sh, int sw, int pt, int ph, int pw):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t T = x.shape[2], H = x.shape[3], W = x.shape[4]
    cdef Py_ssize_t To = _out_extent(T, kt, st, pt)
    cdef Py_ssize_t Ho = _out_extent(H, kh, sh, ph)
    cdef Py_ssize_t Wo = _out_extent(W, kw, sw, pw)
    cdef Py_ssize_t K = C * kt * kh * kw
    dtype = np.float32 if real is float else np.float64
    out = np.empty((B, K, To * Ho * Wo), dtype=dtype)
    cdef real[:, :, ::1] cols = out
    cdef Py_ssize_t b, c, a, i, j, row, to, ho, wo, p, t, h, w
    with nogil:
        for b in range(B):
            for c in range(C):
                for a in range(kt):
                    for i in range(kh):
                        for j in range(kw):
                            row = ((c * kt + a) * kh + i) * kw + j
                            p = 0
                            for to in range(To):
                                t = to * st - pt + a
                                if t < 0 or t >= T:
                                    for ho in range(Ho * Wo):
                                        cols[b, row, p] = 0
                                        p += 1
                                    continue
                                for ho in range(Ho):
                                    h = ho * sh - ph + i
                                    if h < 0 or h >= H:
                                        for wo in range(Wo):
                                            cols[b, row, p] = 0
                                            p += 1
                                        continue
                                    for wo in range(Wo):
                                        w = wo * sw - pw + j
                                        if w < 0 or w >= W:
                                            cols[b, row, p] = 0
                                        else:
                                            cols[b, row, p] = x[b, c, t, h, w]
                                        p += 1
    return out


def col2vol(real[:, :, ::1] cols, int C, int T, int H, int W,
            int kt, int kh, int kw, int st, int sh, int sw,
            int pt, int ph, int pw):
    cdef Py_ssize_t B = cols.shape[0]
    cdef Py_ssize_t To = _out_extent(T, kt, st, pt)
    cdef Py_ssize_t Ho = _out_extent(H, kh, sh, ph)
    cdef Py_ssize_t Wo = _out_extent(W, kw, sw, pw)
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((B, C, T, H, W), dtype=dtype)
    cdef real[:, :, :, :, ::1] x = out
    cdef Py_ssize_t b, c, a, i, j, row, to, ho, wo, p, t, h, w
    with nogil:
        for b in range(B):
            for c in range(C):
                for a in range(kt):
                    for i in range(kh):
                        for j in range(kw):
                            row = ((c * kt + a) * kh + i) * kw + j
                            for to in range(To):
                                t = to * st - pt + a
                                if t < 0 or t >= T:
                                    continue
                                for ho in range(Ho):
                                    h = ho * sh - ph + i
                                    if h < 0 or h >= H:
                                        continue
                                    p = (to * Ho + ho) * Wo
                                    for wo in range(Wo):
                                        w = wo * sw - pw + j
                                        if w >= 0 and w < W:
                                            x[b, c, t, h, w] += cols[b, row, p + wo]
    return out
