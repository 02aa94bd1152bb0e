# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled conv3x3 + maxpool2x2 kernels (NCHW) for the attack ConvNet.

Same contract as ``fedleak._pykernels``; results agree with it to floating
point rounding (summation order differs), argmax indices agree exactly
except on exact ties.
"""
import numpy as np
cimport numpy as cnp
from libc.stdlib cimport malloc, free

ctypedef fused real:
    float
    double


def conv3x3_pool_forward(real[:, :, :, ::1] x, real[:, :, ::1] w):
    """Valid 3x3 convolution (no bias) followed by 2x2 max pooling.

    ``x`` is ``[n, cin, h, w]`` and ``w`` is ``[cout, cin, 9]`` with taps in
    row-major (di, dj) order. Only conv outputs covered by a pooling window
    are computed. Returns ``(pooled, arg)`` where ``arg`` is the in-window
    argmax (0..3, row-major; first maximum wins).
    """
    cdef Py_ssize_t n = x.shape[0], cin = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t cout = w.shape[0]
    cdef Py_ssize_t h2 = (h - 2) // 2, w2 = (wd - 2) // 2, L = 2 * w2
    if w.shape[1] != cin or w.shape[2] != 9:
        raise ValueError("kernel tensor does not match the input channels")
    if h2 < 1 or w2 < 1:
        raise ValueError("input too small for conv3x3 + pool2x2")
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n, cout, h2, w2), dtype=dtype)
    arg = np.empty((n, cout, h2, w2), dtype=np.int8)
    cdef real[:, :, :, ::1] o = out
    cdef cnp.int8_t[:, :, :, ::1] a = arg
    cdef real* buf = <real*> malloc(2 * L * sizeof(real))
    if buf == NULL:
        raise MemoryError()
    cdef real* r0 = buf
    cdef real* r1 = buf + L
    cdef Py_ssize_t b, co, ci, i, j, jj
    cdef real best, v
    cdef real w0, w1, w2_, w3, w4, w5, w6, w7, w8
    cdef real* xa
    cdef real* xb
    cdef real* xc
    cdef real* xd
    cdef cnp.int8_t pos
    try:
        with nogil:
            for b in range(n):
                for co in range(cout):
                    for i in range(h2):
                        for jj in range(2 * L):
                            buf[jj] = 0
                        for ci in range(cin):
                            # all 9 taps in one pass per conv row; rows 2i..2i+3 feed both conv rows
                            w0 = w[co, ci, 0]
                            w1 = w[co, ci, 1]
                            w2_ = w[co, ci, 2]
                            w3 = w[co, ci, 3]
                            w4 = w[co, ci, 4]
                            w5 = w[co, ci, 5]
                            w6 = w[co, ci, 6]
                            w7 = w[co, ci, 7]
                            w8 = w[co, ci, 8]
                            xa = &x[b, ci, 2 * i, 0]
                            xb = &x[b, ci, 2 * i + 1, 0]
                            xc = &x[b, ci, 2 * i + 2, 0]
                            xd = &x[b, ci, 2 * i + 3, 0] if 2 * i + 3 < h else xc
                            for jj in range(L):
                                r0[jj] += (w0 * xa[jj] + w1 * xa[jj + 1] + w2_ * xa[jj + 2]
                                           + w3 * xb[jj] + w4 * xb[jj + 1] + w5 * xb[jj + 2]
                                           + w6 * xc[jj] + w7 * xc[jj + 1] + w8 * xc[jj + 2])
                            for jj in range(L):
                                r1[jj] += (w0 * xb[jj] + w1 * xb[jj + 1] + w2_ * xb[jj + 2]
                                           + w3 * xc[jj] + w4 * xc[jj + 1] + w5 * xc[jj + 2]
                                           + w6 * xd[jj] + w7 * xd[jj + 1] + w8 * xd[jj + 2])
                        for j in range(w2):
                            best = r0[2 * j]
                            pos = 0
                            v = r0[2 * j + 1]
                            if v > best:
                                best = v
                                pos = 1
                            v = r1[2 * j]
                            if v > best:
                                best = v
                                pos = 2
                            v = r1[2 * j + 1]
                            if v > best:
                                best = v
                                pos = 3
                            o[b, co, i, j] = best
                            a[b, co, i, j] = pos
    finally:
        free(buf)
    return out, arg


def conv3x3_pool_backward(real[:, :, :, ::1] x, real[:, :, ::1] w, real[:, :, :, ::1] dpool,
                          cnp.int8_t[:, :, :, ::1] arg, bint need_dx):
    """Gradients of ``conv3x3_pool_forward`` given d(loss)/d(pooled).

    Only the argmax position of each window receives gradient, so the
    work is a sparse gather. Returns ``(dw, dx)``; ``dx`` is None unless
    ``need_dx``. Weight gradients accumulate in double precision.
    """
    cdef Py_ssize_t n = x.shape[0], cin = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t cout = w.shape[0]
    cdef Py_ssize_t h2 = dpool.shape[2], w2 = dpool.shape[3]
    if (h2 != (h - 2) // 2 or w2 != (wd - 2) // 2 or dpool.shape[1] != cout
            or dpool.shape[0] != n or w.shape[1] != cin):
        raise ValueError("gradient shapes do not match the forward pass")
    dtype = np.float32 if real is float else np.float64
    dw_acc = np.zeros((cout, cin, 9), dtype=np.float64)
    cdef double[:, :, ::1] dw = dw_acc
    dx_arr = np.zeros((n, cin, h, wd), dtype=dtype) if need_dx else np.zeros((1, 1, 1, 1), dtype=dtype)
    cdef real[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t b, co, ci, i, j, di, y, xx
    cdef cnp.int8_t p
    cdef real g
    cdef real* xrow
    cdef real* dxrow
    cdef double* dwk
    cdef real* wk
    with nogil:
        for b in range(n):
            for co in range(cout):
                for i in range(h2):
                    for j in range(w2):
                        g = dpool[b, co, i, j]
                        if g == 0:
                            continue
                        p = arg[b, co, i, j]
                        y = 2 * i + p // 2
                        xx = 2 * j + p % 2
                        for ci in range(cin):
                            dwk = &dw[co, ci, 0]
                            wk = &w[co, ci, 0]
                            for di in range(3):
                                xrow = &x[b, ci, y + di, xx]
                                dwk[3 * di] += g * xrow[0]
                                dwk[3 * di + 1] += g * xrow[1]
                                dwk[3 * di + 2] += g * xrow[2]
                                if need_dx:
                                    dxrow = &dx[b, ci, y + di, xx]
                                    dxrow[0] += g * wk[3 * di]
                                    dxrow[1] += g * wk[3 * di + 1]
                                    dxrow[2] += g * wk[3 * di + 2]
    return dw_acc.astype(dtype), (dx_arr if need_dx else None)
