# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernel backend: direct-loop 3D conv/pool/upsample kernels.

Mirrors the `_kernels_np` call surface. Outer loops run under OpenMP with
disjoint output slots per thread and fixed-order inner reductions, so results
are bit-identical regardless of thread count.
"""

import numpy as np

cimport numpy as cnp
from cython.parallel cimport prange

NAME = "compiled"

cdef int _num_threads = 1


def set_num_threads(n):
    global _num_threads
    _num_threads = max(1, int(n))


def conv3d_forward(x, double[:, :, :, :, ::1] w,
                   int stride, int pad, int dilation, int groups):
    # pad once up front so the hot loops run branch-free
    if pad > 0:
        x = np.pad(x, ((0, 0), (0, 0)) + ((pad, pad),) * 3)
    cdef double[:, :, :, :, ::1] xv = np.ascontiguousarray(x)
    cdef Py_ssize_t N = xv.shape[0], Cin = xv.shape[1]
    cdef Py_ssize_t Dp = xv.shape[2], Hp = xv.shape[3], Wp = xv.shape[4]
    cdef Py_ssize_t Cout = w.shape[0], cpg_in = w.shape[1], K = w.shape[2]
    cdef Py_ssize_t cpg_out = Cout // groups
    cdef Py_ssize_t Do = (Dp - dilation * (K - 1) - 1) // stride + 1
    cdef Py_ssize_t Ho = (Hp - dilation * (K - 1) - 1) // stride + 1
    cdef Py_ssize_t Wo = (Wp - dilation * (K - 1) - 1) // stride + 1
    y = np.zeros((N, Cout, Do, Ho, Wo), dtype=np.float64)
    cdef double[:, :, :, :, ::1] yv = y
    cdef Py_ssize_t nc, n, co, g, ci0, od, oh, ow, ci, kd, kh, kw
    cdef Py_ssize_t base_d, base_h, off_w
    cdef double wt
    cdef int nt = _num_threads
    # innermost loop runs along contiguous output rows so it vectorizes
    for nc in prange(N * Cout, nogil=True, schedule='static', num_threads=nt):
        n = nc // Cout
        co = nc % Cout
        g = co // cpg_out
        ci0 = g * cpg_in
        for od in range(Do):
            base_d = od * stride
            for oh in range(Ho):
                base_h = oh * stride
                for ci in range(cpg_in):
                    for kd in range(K):
                        for kh in range(K):
                            for kw in range(K):
                                wt = w[co, ci, kd, kh, kw]
                                off_w = kw * dilation
                                for ow in range(Wo):
                                    yv[n, co, od, oh, ow] += wt * xv[
                                        n, ci0 + ci,
                                        base_d + kd * dilation,
                                        base_h + kh * dilation,
                                        ow * stride + off_w]
    return y


def conv3d_backward_input(double[:, :, :, :, ::1] gy, double[:, :, :, :, ::1] w,
                          x_shape, int stride, int pad, int dilation, int groups):
    cdef Py_ssize_t N = x_shape[0], Cin = x_shape[1]
    cdef Py_ssize_t D = x_shape[2], H = x_shape[3], W = x_shape[4]
    cdef Py_ssize_t Cout = w.shape[0], cpg_in = w.shape[1], K = w.shape[2]
    cdef Py_ssize_t cpg_out = Cout // groups
    cdef Py_ssize_t Do = gy.shape[2], Ho = gy.shape[3], Wo = gy.shape[4]
    gx = np.zeros((N, Cin, D, H, W), dtype=np.float64)
    cdef double[:, :, :, :, ::1] gxv = gx
    cdef Py_ssize_t nc, n, ci, g, co0, d, h, ww, co, kd, kh, kw, od, oh, ow
    cdef Py_ssize_t td, th, tw
    cdef double acc
    cdef int nt = _num_threads
    # gather form: each input voxel sums the output positions its taps feed
    for nc in prange(N * Cin, nogil=True, schedule='static', num_threads=nt):
        n = nc // Cin
        ci = nc % Cin
        g = ci // cpg_in
        co0 = g * cpg_out
        for d in range(D):
            for h in range(H):
                for ww in range(W):
                    acc = 0.0
                    for kd in range(K):
                        td = d + pad - kd * dilation
                        if td < 0 or td % stride != 0:
                            continue
                        od = td // stride
                        if od >= Do:
                            continue
                        for kh in range(K):
                            th = h + pad - kh * dilation
                            if th < 0 or th % stride != 0:
                                continue
                            oh = th // stride
                            if oh >= Ho:
                                continue
                            for kw in range(K):
                                tw = ww + pad - kw * dilation
                                if tw < 0 or tw % stride != 0:
                                    continue
                                ow = tw // stride
                                if ow >= Wo:
                                    continue
                                for co in range(cpg_out):
                                    acc = acc + gy[n, co0 + co, od, oh, ow] * w[co0 + co, ci - g * cpg_in, kd, kh, kw]
                    gxv[n, ci, d, h, ww] = acc
    return gx


def conv3d_backward_weight(double[:, :, :, :, ::1] gy, x,
                           w_shape, int stride, int pad, int dilation, int groups):
    cdef Py_ssize_t Cout = w_shape[0], cpg_in = w_shape[1], K = w_shape[2]
    if pad > 0:
        x = np.pad(x, ((0, 0), (0, 0)) + ((pad, pad),) * 3)
    cdef double[:, :, :, :, ::1] xv = np.ascontiguousarray(x)
    cdef Py_ssize_t N = xv.shape[0]
    cdef Py_ssize_t Do = gy.shape[2], Ho = gy.shape[3], Wo = gy.shape[4]
    cdef Py_ssize_t cpg_out = Cout // groups
    gw = np.zeros((Cout, cpg_in, K, K, K), dtype=np.float64)
    cdef double[:, :, :, :, ::1] gwv = gw
    cdef Py_ssize_t co, g, ci0, ci, kd, kh, kw, n, od, oh, ow
    cdef Py_ssize_t off_d, off_h, off_w
    cdef double acc
    cdef int nt = _num_threads
    for co in prange(Cout, nogil=True, schedule='static', num_threads=nt):
        g = co // cpg_out
        ci0 = g * cpg_in
        for ci in range(cpg_in):
            for kd in range(K):
                off_d = kd * dilation
                for kh in range(K):
                    off_h = kh * dilation
                    for kw in range(K):
                        off_w = kw * dilation
                        acc = 0.0
                        for n in range(N):
                            for od in range(Do):
                                for oh in range(Ho):
                                    for ow in range(Wo):
                                        acc = acc + gy[n, co, od, oh, ow] \
                                            * xv[n, ci0 + ci,
                                                 od * stride + off_d,
                                                 oh * stride + off_h,
                                                 ow * stride + off_w]
                        gwv[co, ci, kd, kh, kw] = acc
    return gw


def maxpool3d_forward(double[:, :, :, :, ::1] x, int kernel, int stride, int pad):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t D = x.shape[2], H = x.shape[3], W = x.shape[4]
    cdef Py_ssize_t Do = (D + 2 * pad - kernel) // stride + 1
    cdef Py_ssize_t Ho = (H + 2 * pad - kernel) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - kernel) // stride + 1
    y = np.empty((N, C, Do, Ho, Wo), dtype=np.float64)
    idx = np.empty((N, C, Do, Ho, Wo), dtype=np.int64)
    cdef double[:, :, :, :, ::1] yv = y
    cdef long long[:, :, :, :, ::1] iv = idx
    cdef Py_ssize_t nc, n, c, od, oh, ow, kd, kh, kw, d, h, ww
    cdef double best, v
    cdef long long bi
    cdef int nt = _num_threads
    for nc in prange(N * C, nogil=True, schedule='static', num_threads=nt):
        n = nc // C
        c = nc % C
        for od in range(Do):
            for oh in range(Ho):
                for ow in range(Wo):
                    best = -1e308
                    bi = -1
                    # first maximal element in (kd, kh, kw) scan order wins ties
                    for kd in range(kernel):
                        d = od * stride - pad + kd
                        if d < 0 or d >= D:
                            continue
                        for kh in range(kernel):
                            h = oh * stride - pad + kh
                            if h < 0 or h >= H:
                                continue
                            for kw in range(kernel):
                                ww = ow * stride - pad + kw
                                if ww < 0 or ww >= W:
                                    continue
                                v = x[n, c, d, h, ww]
                                if v > best:
                                    best = v
                                    bi = (d * H + h) * W + ww
                    yv[n, c, od, oh, ow] = best
                    iv[n, c, od, oh, ow] = bi
    return y, idx


def maxpool3d_backward(double[:, :, :, :, ::1] gy, long long[:, :, :, :, ::1] idx, x_shape):
    cdef Py_ssize_t N = x_shape[0], C = x_shape[1]
    cdef Py_ssize_t voxels = x_shape[2] * x_shape[3] * x_shape[4]
    gx = np.zeros((N, C, voxels), dtype=np.float64)
    cdef double[:, :, ::1] gxv = gx
    cdef Py_ssize_t nc, n, c, od, oh, ow
    cdef Py_ssize_t Do = gy.shape[2], Ho = gy.shape[3], Wo = gy.shape[4]
    cdef int nt = _num_threads
    # each (n, c) plane scatters into its own slice: no cross-thread writes
    for nc in prange(N * C, nogil=True, schedule='static', num_threads=nt):
        n = nc // C
        c = nc % C
        for od in range(Do):
            for oh in range(Ho):
                for ow in range(Wo):
                    gxv[n, c, idx[n, c, od, oh, ow]] += gy[n, c, od, oh, ow]
    return gx.reshape(x_shape)


def upsample2x_forward(double[:, :, :, :, ::1] x):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t D = x.shape[2], H = x.shape[3], W = x.shape[4]
    y = np.empty((N, C, 2 * D, 2 * H, 2 * W), dtype=np.float64)
    cdef double[:, :, :, :, ::1] yv = y
    cdef Py_ssize_t nc, n, c, d, h, w
    cdef double v
    cdef int nt = _num_threads
    for nc in prange(N * C, nogil=True, schedule='static', num_threads=nt):
        n = nc // C
        c = nc % C
        for d in range(2 * D):
            for h in range(2 * H):
                for w in range(2 * W):
                    yv[n, c, d, h, w] = x[n, c, d // 2, h // 2, w // 2]
    return y


def upsample2x_backward(double[:, :, :, :, ::1] gy):
    cdef Py_ssize_t N = gy.shape[0], C = gy.shape[1]
    cdef Py_ssize_t D = gy.shape[2] // 2, H = gy.shape[3] // 2, W = gy.shape[4] // 2
    gx = np.zeros((N, C, D, H, W), dtype=np.float64)
    cdef double[:, :, :, :, ::1] gxv = gx
    cdef Py_ssize_t nc, n, c, d, h, w
    cdef int nt = _num_threads
    for nc in prange(N * C, nogil=True, schedule='static', num_threads=nt):
        n = nc // C
        c = nc % C
        for d in range(2 * D):
            for h in range(2 * H):
                for w in range(2 * W):
                    gxv[n, c, d // 2, h // 2, w // 2] += gy[n, c, d, h, w]
    return gx
