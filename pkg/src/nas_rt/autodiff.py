"""Dense float64 tensors with reverse-mode automatic differentiation.

A Tensor wraps a numpy array plus an optional tape node. Nodes carry creation
order, which is already a topological order of the computation DAG, so the
backward pass just walks tensors by descending id and applies each node's
backward rule. Gradients accumulate; callers zero them between steps.

Broadcasting is deliberately limited to tensor-scalar (`scale`, `smul`): every
other binary op demands equal shapes, which keeps the backward rules small.
"""

import contextlib
import itertools

import numpy as np

from .errors import ArgumentError, ShapeError

_id_counter = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block (inference / timing runs)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class TapeNode:
    """One recorded operation: kind, parent tensors, and the backward rule."""

    __slots__ = ("op_kind", "inputs", "backward_fn")

    def __init__(self, op_kind, inputs, backward_fn):
        self.op_kind = op_kind
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "_id")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 5:
            raise ShapeError(f"tensors support at most 5 axes, got {arr.ndim}")
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = arr.copy() if arr.ndim == 0 else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None
        self._id = next(_id_counter)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self):
        if self.data.size != 1:
            raise ArgumentError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        backward(self)

    # operator sugar used throughout the engine
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def sum(self):
        return tsum(self)


def make_op(op_kind, data, inputs, backward_fn):
    """Wrap a forward result; records a tape node when grad is flowing."""
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = TapeNode(op_kind, tuple(inputs), backward_fn)
    return out


def backward(root):
    """Populate .grad on every requires_grad tensor reachable from root.

    Root must be scalar. Repeated calls accumulate into existing grads.
    """
    if root.data.size != 1:
        raise ArgumentError(f"backward root must be scalar, got shape {root.data.shape}")
    root._accumulate(np.ones_like(root.data))
    if root.node is None:
        return
    # collect the reachable sub-DAG; creation ids give topological order
    seen = {root._id: root}
    stack = [root]
    while stack:
        t = stack.pop()
        if t.node is None:
            continue
        for parent in t.node.inputs:
            if parent.requires_grad and parent._id not in seen:
                seen[parent._id] = parent
                stack.append(parent)
    for t in sorted(seen.values(), key=lambda t: t._id, reverse=True):
        if t.node is None or t.grad is None:
            continue
        grads = t.node.backward_fn(t.grad)
        for parent, g in zip(t.node.inputs, grads):
            if g is not None and parent.requires_grad:
                parent._accumulate(g)


def _check_same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def add(a, b):
    _check_same_shape(a, b, "add")
    return make_op("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a, b):
    _check_same_shape(a, b, "mul")
    return make_op("mul", a.data * b.data, (a, b),
                   lambda g: (g * b.data, g * a.data))


def scale(a, c):
    c = float(c)
    return make_op("scale", a.data * c, (a,), lambda g: (g * c,))


def smul(a, s):
    """Tensor times scalar-Tensor (the one permitted broadcast)."""
    if s.data.size != 1:
        raise ShapeError(f"smul scalar operand has shape {s.data.shape}")
    sv = s.data.reshape(-1)[0]
    return make_op("smul", a.data * sv, (a, s),
                   lambda g: (g * sv, np.array((g * a.data).sum())))


def tsum(a):
    return make_op("sum", np.array(a.data.sum()), (a,),
                   lambda g: (np.broadcast_to(g, a.data.shape).copy(),))


def log(a):
    return make_op("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def exp(a):
    out_data = np.exp(a.data)
    return make_op("exp", out_data, (a,), lambda g: (g * out_data,))


def relu(a):
    mask = a.data > 0.0
    return make_op("relu", np.where(mask, a.data, 0.0), (a,),
                   lambda g: (g * mask,))


def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return ((g - inner) * y,)

    return make_op("softmax", y, (a,), bw)


def concat_channels(tensors):
    """Concatenate along axis 1; inputs must agree on every other extent."""
    if not tensors:
        raise ArgumentError("concat_channels of an empty list")
    if len(tensors) == 1:
        return tensors[0]
    first = tensors[0].data.shape
    for t in tensors[1:]:
        s = t.data.shape
        if len(s) != len(first) or s[:1] != first[:1] or s[2:] != first[2:]:
            raise ShapeError(f"concat_channels: incompatible shapes {first} vs {s}")
    widths = [t.data.shape[1] for t in tensors]
    bounds = np.cumsum([0] + widths)

    def bw(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]].copy() for i in range(len(tensors)))

    return make_op("concat", np.concatenate([t.data for t in tensors], axis=1),
                   tuple(tensors), bw)


def slice_channels(a, start, stop):
    if a.data.ndim < 2 or not (0 <= start < stop <= a.data.shape[1]):
        raise ShapeError(f"slice_channels [{start}:{stop}] on shape {a.data.shape}")

    def bw(g):
        gx = np.zeros_like(a.data)
        gx[:, start:stop] = g
        return (gx,)

    return make_op("slice", a.data[:, start:stop].copy(), (a,), bw)


def element(a, i):
    """Scalar-Tensor view of a[i] on a 1-D tensor; backward scatters."""
    if a.data.ndim != 1:
        raise ShapeError(f"element() expects a vector, got shape {a.data.shape}")
    i = int(i)

    def bw(g):
        gx = np.zeros_like(a.data)
        gx[i] = g.reshape(())
        return (gx,)

    return make_op("element", np.array(a.data[i]), (a,), bw)


def add_channel_bias(x, b):
    if x.data.ndim != 5 or b.data.ndim != 1 or b.data.shape[0] != x.data.shape[1]:
        raise ShapeError(f"bias shape {b.data.shape} vs input {x.data.shape}")
    return make_op("bias", x.data + b.data[None, :, None, None, None], (x, b),
                   lambda g: (g, g.sum(axis=(0, 2, 3, 4))))


def finite_diff_check(f, x, h=1e-5):
    """Max relative error between analytic grad of f at x and central differences.

    f maps a Tensor to a scalar Tensor. Error per coordinate is
    |analytic - numeric| / (|analytic| + 1e-8).
    """
    if h <= 0:
        raise ArgumentError("finite_diff_check requires h > 0")
    x.zero_grad()
    out = f(x)
    if out.data.size != 1:
        raise ArgumentError("finite_diff_check needs a scalar-valued function")
    backward(out)
    # a parameter the output never touched has an (exactly) zero gradient
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)
    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x).item()
        flat[i] = orig - h
        fm = f(x).item()
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * h)
    rel = np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)
    return float(rel.max())
