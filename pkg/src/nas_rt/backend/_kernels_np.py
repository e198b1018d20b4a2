"""Pure-numpy kernel backend.

Same call surface as the compiled Cython core (`_kernels_cy`); used when the
extension is unavailable or when NAS_RT_BACKEND=python forces it. Convolutions
go through sliding windows + einsum, pooling through windowed argmax, so the
heavy lifting stays vectorized. All arrays are float64 and C-contiguous.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NAME = "python"


def set_num_threads(n):
    # einsum/argmax run single-threaded; nothing to configure.
    pass


def _windows(x, kernel, stride, pad, dilation, fill=0.0):
    """Return view [N, C, Do, Ho, Wo, k, k, k] of the padded input."""
    span = dilation * (kernel - 1) + 1
    if pad > 0:
        x = np.pad(x, ((0, 0), (0, 0)) + ((pad, pad),) * 3, constant_values=fill)
    win = sliding_window_view(x, (span,) * 3, axis=(2, 3, 4))
    win = win[:, :, ::stride, ::stride, ::stride]
    if dilation > 1:
        win = win[..., ::dilation, ::dilation, ::dilation]
    return win


def conv3d_forward(x, w, stride, pad, dilation, groups):
    n, cin = x.shape[:2]
    cout, cpg_in, kernel = w.shape[0], w.shape[1], w.shape[2]
    cpg_out = cout // groups
    win = _windows(x, kernel, stride, pad, dilation)
    out = np.empty((n, cout) + win.shape[2:5], dtype=np.float64)
    for g in range(groups):
        wg = w[g * cpg_out:(g + 1) * cpg_out]
        xg = win[:, g * cpg_in:(g + 1) * cpg_in]
        out[:, g * cpg_out:(g + 1) * cpg_out] = np.einsum(
            "ncdhwxyz,ocxyz->nodhw", xg, wg, optimize=True)
    return np.ascontiguousarray(out)


def conv3d_backward_input(gy, w, x_shape, stride, pad, dilation, groups):
    n, cin, d, h, wd = x_shape
    cout, cpg_in, kernel = w.shape[0], w.shape[1], w.shape[2]
    cpg_out = cout // groups
    do, ho, wo = gy.shape[2:]
    gxp = np.zeros((n, cin, d + 2 * pad, h + 2 * pad, wd + 2 * pad), dtype=np.float64)
    # dL/d(window) then scatter-add each of the k^3 taps back into the padded grid
    gwin = np.empty((n, cin, do, ho, wo, kernel, kernel, kernel), dtype=np.float64)
    for g in range(groups):
        wg = w[g * cpg_out:(g + 1) * cpg_out]
        gg = gy[:, g * cpg_out:(g + 1) * cpg_out]
        gwin[:, g * cpg_in:(g + 1) * cpg_in] = np.einsum(
            "nodhw,ocxyz->ncdhwxyz", gg, wg, optimize=True)
    for kd in range(kernel):
        for kh in range(kernel):
            for kw in range(kernel):
                d0, h0, w0 = kd * dilation, kh * dilation, kw * dilation
                gxp[:, :,
                    d0:d0 + do * stride:stride,
                    h0:h0 + ho * stride:stride,
                    w0:w0 + wo * stride:stride] += gwin[..., kd, kh, kw]
    if pad > 0:
        gxp = gxp[:, :, pad:pad + d, pad:pad + h, pad:pad + wd]
    return np.ascontiguousarray(gxp)


def conv3d_backward_weight(gy, x, w_shape, stride, pad, dilation, groups):
    cout, cpg_in, kernel = w_shape[0], w_shape[1], w_shape[2]
    cpg_out = cout // groups
    win = _windows(x, kernel, stride, pad, dilation)
    gw = np.empty(w_shape, dtype=np.float64)
    for g in range(groups):
        xg = win[:, g * cpg_in:(g + 1) * cpg_in]
        gg = gy[:, g * cpg_out:(g + 1) * cpg_out]
        gw[g * cpg_out:(g + 1) * cpg_out] = np.einsum(
            "ncdhwxyz,nodhw->ocxyz", xg, gg, optimize=True)
    return gw


def maxpool3d_forward(x, kernel, stride, pad):
    n, c, d, h, w = x.shape
    win = _windows(x, kernel, stride, pad, 1, fill=-np.inf)
    do, ho, wo = win.shape[2:5]
    flat = win.reshape(n, c, do, ho, wo, kernel ** 3)
    am = np.argmax(flat, axis=-1)  # first max in (kd, kh, kw) scan order
    y = np.take_along_axis(flat, am[..., None], axis=-1)[..., 0]
    kd, rem = np.divmod(am, kernel * kernel)
    kh, kw = np.divmod(rem, kernel)
    od = np.arange(do)[:, None, None]
    oh = np.arange(ho)[None, :, None]
    ow = np.arange(wo)[None, None, :]
    src_d = od * stride - pad + kd
    src_h = oh * stride - pad + kh
    src_w = ow * stride - pad + kw
    idx = (src_d * h + src_h) * w + src_w
    return np.ascontiguousarray(y), np.ascontiguousarray(idx.astype(np.int64))


def maxpool3d_backward(gy, idx, x_shape):
    n, c = x_shape[0], x_shape[1]
    voxels = x_shape[2] * x_shape[3] * x_shape[4]
    gx = np.zeros((n, c, voxels), dtype=np.float64)
    ni = np.arange(n)[:, None, None, None, None]
    ci = np.arange(c)[None, :, None, None, None]
    np.add.at(gx, (ni, ci, idx), gy)
    return gx.reshape(x_shape)


def upsample2x_forward(x):
    return np.ascontiguousarray(
        x.repeat(2, axis=2).repeat(2, axis=3).repeat(2, axis=4))


def upsample2x_backward(gy):
    n, c, d, h, w = gy.shape
    return np.ascontiguousarray(
        gy.reshape(n, c, d // 2, 2, h // 2, 2, w // 2, 2).sum(axis=(3, 5, 7)))
