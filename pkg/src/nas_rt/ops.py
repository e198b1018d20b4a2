"""Searchable primitive operators, scaling/preprocess blocks, and loss heads.

The six candidate ops all preserve spatial extents under their fixed
hyperparameters (kernel 3, stride 1; padding 1, except the dilated conv with
padding 2, dilation 2). Convolutional primitives carry a trailing ReLU;
pooling, identity and zero do not.
"""

import numpy as np

from . import autodiff as ad
from . import backend
from .errors import ArgumentError, DataError, ShapeError

# canonical op order; index = position of an alpha entry
PRIMITIVE_OPS = (
    "conv3d",
    "dilated_conv3d",
    "separable_conv3d",
    "maxpool3d",
    "identity",
    "zero",
)
ZERO_INDEX = PRIMITIVE_OPS.index("zero")


def _out_extent(size, kernel, stride, pad, dilation):
    span = dilation * (kernel - 1) + 1
    num = size + 2 * pad - span
    if num < 0 or num % stride != 0:
        raise ShapeError(
            f"invalid conv geometry: size={size} kernel={kernel} stride={stride} "
            f"pad={pad} dilation={dilation}")
    return num // stride + 1


def conv3d(x, w, b=None, stride=1, pad=1, dilation=1, groups=1):
    """Cross-correlation (no kernel flip) over the three trailing axes."""
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise ShapeError(f"conv3d expects 5-D input/weight, got {x.data.shape}/{w.data.shape}")
    n, cin = x.data.shape[:2]
    cout, cpg, kernel = w.data.shape[0], w.data.shape[1], w.data.shape[2]
    if w.data.shape[2:] != (kernel,) * 3:
        raise ShapeError(f"conv3d kernel must be cubic, got {w.data.shape[2:]}")
    if cin != cpg * groups or cout % groups != 0:
        raise ShapeError(
            f"conv3d channels: input {cin}, weight {w.data.shape}, groups {groups}")
    for size in x.data.shape[2:]:
        _out_extent(size, kernel, stride, pad, dilation)

    k = backend.active
    y = k.conv3d_forward(x.data, w.data, stride, pad, dilation, groups)
    x_shape, w_shape = x.data.shape, w.data.shape
    xd, wd = x.data, w.data

    def bw(g):
        g = np.ascontiguousarray(g)
        gx = k.conv3d_backward_input(g, wd, x_shape, stride, pad, dilation, groups)
        gw = k.conv3d_backward_weight(g, xd, w_shape, stride, pad, dilation, groups)
        return gx, gw

    out = ad.make_op("conv3d", np.asarray(y), (x, w), bw)
    if b is not None:
        out = ad.add_channel_bias(out, b)
    return out


def separable_conv3d(x, dw, pw, b=None):
    """Depthwise 3x3x3 (groups = Cin) followed by a pointwise 1x1x1 conv."""
    cin = x.data.shape[1]
    if dw.data.shape[0] != cin or dw.data.shape[1] != 1:
        raise ShapeError(f"depthwise weight {dw.data.shape} does not match {cin} channels")
    if pw.data.shape[1] != cin:
        raise ShapeError(f"pointwise weight {pw.data.shape} does not match {cin} channels")
    mid = conv3d(x, dw, None, stride=1, pad=1, dilation=1, groups=cin)
    return conv3d(mid, pw, b, stride=1, pad=0, dilation=1, groups=1)


def maxpool3d(x, kernel=3, stride=1, pad=1):
    if x.data.ndim != 5:
        raise ShapeError(f"maxpool3d expects 5-D input, got {x.data.shape}")
    for size in x.data.shape[2:]:
        _out_extent(size, kernel, stride, pad, 1)
    k = backend.active
    y, idx = k.maxpool3d_forward(x.data, kernel, stride, pad)
    x_shape = x.data.shape

    def bw(g):
        return (k.maxpool3d_backward(np.ascontiguousarray(g), idx, x_shape),)

    return ad.make_op("maxpool3d", np.asarray(y), (x,), bw)


def identity_op(x):
    return x


def zero_op(x):
    # constant all-zeros of x's shape; contributes exactly zero gradient
    return ad.Tensor(np.zeros_like(x.data))


def upsample_nearest2x(x):
    if x.data.ndim != 5:
        raise ShapeError(f"upsample expects 5-D input, got {x.data.shape}")
    k = backend.active

    def bw(g):
        return (k.upsample2x_backward(np.ascontiguousarray(g)),)

    return ad.make_op("upsample2x", np.asarray(k.upsample2x_forward(x.data)), (x,), bw)


def contract_preprocess(x, w, b):
    """Halve D,H,W (kernel-2 stride-2 maxpool) then 1x1x1 conv to w's Cout."""
    for size in x.data.shape[2:]:
        if size % 2 != 0:
            raise ShapeError(f"contract needs even spatial extents, got {x.data.shape}")
    pooled = maxpool3d(x, kernel=2, stride=2, pad=0)
    return conv3d(pooled, w, b, stride=1, pad=0)


def expand_preprocess(x, w, b):
    """Double D,H,W (nearest-neighbor) then 1x1x1 conv to w's Cout."""
    return conv3d(upsample_nearest2x(x), w, b, stride=1, pad=0)


def nonscale_preprocess(x, w, b):
    return conv3d(x, w, b, stride=1, pad=0)


def apply_primitive(kind, x, weights):
    """Run one searchable primitive; conv-family ops get a trailing ReLU."""
    if kind == "conv3d":
        return ad.relu(conv3d(x, weights["w"], weights["b"], stride=1, pad=1))
    if kind == "dilated_conv3d":
        return ad.relu(conv3d(x, weights["w"], weights["b"], stride=1, pad=2, dilation=2))
    if kind == "separable_conv3d":
        return ad.relu(separable_conv3d(x, weights["dw"], weights["pw"], weights["b"]))
    if kind == "maxpool3d":
        return maxpool3d(x, kernel=3, stride=1, pad=1)
    if kind == "identity":
        return identity_op(x)
    if kind == "zero":
        return zero_op(x)
    raise ArgumentError(f"unknown primitive op {kind!r}")


def primitive_weight_shapes(kind, channels):
    c = channels
    if kind in ("conv3d", "dilated_conv3d"):
        return {"w": (c, c, 3, 3, 3), "b": (c,)}
    if kind == "separable_conv3d":
        return {"dw": (c, 1, 3, 3, 3), "pw": (c, c, 1, 1, 1), "b": (c,)}
    return {}


def he_normal(rng, shape):
    """He-style init for conv weights [Cout, Cin/g, k, k, k]."""
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def init_conv_weights(rng, cin, cout, kernel):
    w = ad.Tensor(he_normal(rng, (cout, cin, kernel, kernel, kernel)), requires_grad=True)
    b = ad.Tensor(np.zeros(cout), requires_grad=True)
    return w, b


def init_primitive_weights(rng, kind, channels):
    out = {}
    for name, shape in primitive_weight_shapes(kind, channels).items():
        if name == "b":
            out[name] = ad.Tensor(np.zeros(shape), requires_grad=True)
        else:
            out[name] = ad.Tensor(he_normal(rng, shape), requires_grad=True)
    return out


def cross_entropy(logits, labels):
    """Mean voxelwise negative log-likelihood of the integer label volume."""
    if logits.data.ndim != 5:
        raise ShapeError(f"logits must be [N,K,D,H,W], got {logits.data.shape}")
    labels = np.asarray(labels)
    expected = logits.data.shape[:1] + logits.data.shape[2:]
    if labels.shape != expected:
        raise ShapeError(f"labels shape {labels.shape}, expected {expected}")
    k = logits.data.shape[1]
    if labels.min() < 0 or labels.max() >= k:
        raise DataError(
            f"labels must lie in [0,{k}), got range [{labels.min()},{labels.max()}]")

    x = logits.data
    m = x.max(axis=1, keepdims=True)
    logp = x - (m + np.log(np.exp(x - m).sum(axis=1, keepdims=True)))
    lab = labels[:, None]
    picked = np.take_along_axis(logp, lab, axis=1)
    voxels = labels.size
    loss = -picked.sum() / voxels

    def bw(g):
        p = np.exp(logp)
        np.put_along_axis(p, lab, np.take_along_axis(p, lab, axis=1) - 1.0, axis=1)
        return (p * (g.reshape(()) / voxels),)

    return ad.make_op("cross_entropy", np.array(loss), (logits,), bw)


def dice_score(pred_labels, true_labels, class_id):
    """2|A∩B| / (|A|+|B|); defined as 1.0 when both masks are empty."""
    pred_labels = np.asarray(pred_labels)
    true_labels = np.asarray(true_labels)
    if pred_labels.shape != true_labels.shape:
        raise ShapeError(f"dice shapes differ: {pred_labels.shape} vs {true_labels.shape}")
    a = pred_labels == class_id
    b = true_labels == class_id
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom
