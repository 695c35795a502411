# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled same-padded convolution kernels (NHWC, filters k x k x C_in x C_out)."""

import numpy as np

ctypedef fused real:
    float
    double


def conv2d_same_forward(real[:, :, :, ::1] x, real[:, :, :, ::1] w):
    cdef Py_ssize_t n_batch = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3]
    cdef Py_ssize_t k = w.shape[0], O = w.shape[3]
    cdef Py_ssize_t lo = (k - 1) // 2
    cdef Py_ssize_t n, i, j, a, b, c, o, ii, jj
    cdef real xv
    cdef real *po
    cdef real *pw
    cdef real *pg
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((n_batch, H, W, O), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    with nogil:
        for n in range(n_batch):
            for i in range(H):
                for j in range(W):
                    for a in range(k):
                        ii = i + a - lo
                        if ii < 0 or ii >= H:
                            continue
                        for b in range(k):
                            jj = j + b - lo
                            if jj < 0 or jj >= W:
                                continue
                            po = &out[n, i, j, 0]
                            for c in range(C):
                                xv = x[n, ii, jj, c]
                                pw = &w[a, b, c, 0]
                                for o in range(O):
                                    po[o] += xv * pw[o]
    return out_arr


def conv2d_same_backward_input(real[:, :, :, ::1] gy, real[:, :, :, ::1] w):
    cdef Py_ssize_t n_batch = gy.shape[0], H = gy.shape[1], W = gy.shape[2], O = gy.shape[3]
    cdef Py_ssize_t k = w.shape[0], C = w.shape[2]
    cdef Py_ssize_t lo = (k - 1) // 2
    cdef Py_ssize_t n, i, j, a, b, c, o, ii, jj
    cdef real acc
    cdef real *pw
    cdef real *pg
    dtype = np.float32 if real is float else np.float64
    gx_arr = np.zeros((n_batch, H, W, C), dtype=dtype)
    cdef real[:, :, :, ::1] gx = gx_arr
    with nogil:
        for n in range(n_batch):
            for i in range(H):
                for j in range(W):
                    for a in range(k):
                        ii = i + a - lo
                        if ii < 0 or ii >= H:
                            continue
                        for b in range(k):
                            jj = j + b - lo
                            if jj < 0 or jj >= W:
                                continue
                            pg = &gy[n, i, j, 0]
                            for c in range(C):
                                pw = &w[a, b, c, 0]
                                acc = 0
                                for o in range(O):
                                    acc = acc + pg[o] * pw[o]
                                gx[n, ii, jj, c] += acc
    return gx_arr


def conv2d_same_backward_filter(real[:, :, :, ::1] x, real[:, :, :, ::1] gy, Py_ssize_t k):
    cdef Py_ssize_t n_batch = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3]
    cdef Py_ssize_t O = gy.shape[3]
    cdef Py_ssize_t lo = (k - 1) // 2
    cdef Py_ssize_t n, i, j, a, b, c, o, ii, jj
    cdef real xv
    cdef real *po
    cdef real *pw
    cdef real *pg
    dtype = np.float32 if real is float else np.float64
    gw_arr = np.zeros((k, k, C, O), dtype=dtype)
    cdef real[:, :, :, ::1] gw = gw_arr
    with nogil:
        for n in range(n_batch):
            for i in range(H):
                for j in range(W):
                    for a in range(k):
                        ii = i + a - lo
                        if ii < 0 or ii >= H:
                            continue
                        for b in range(k):
                            jj = j + b - lo
                            if jj < 0 or jj >= W:
                                continue
                            pg = &gy[n, i, j, 0]
                            for c in range(C):
                                xv = x[n, ii, jj, c]
                                pw = &gw[a, b, c, 0]
                                for o in range(O):
                                    pw[o] += xv * pg[o]
    return gw_arr
