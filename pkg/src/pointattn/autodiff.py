"""A small tape-based reverse-mode autodiff engine on top of numpy.

Only the primitives the rendering pipeline needs are provided. Operations are
recorded on the innermost active :class:`Tape` whenever one of their inputs
requires gradient; outside a tape everything is a plain numpy computation.

    with Tape() as tape:
        x = Tensor(np.ones(5), requires_grad=True)
        loss = sum(sin(x))
        (gx,) = tape.backward(loss, [x])
"""

import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import _kernels

LEAKY_SLOPE = 0.01


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "_node")

    def __init__(self, data, requires_grad=False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class Node:
    op: str
    inputs: tuple
    backward: Optional[Callable]
    leaf: Optional[Tensor] = None


_tape_ids = itertools.count(1)


@dataclass
class Tape:
    """Ordered record of operations; inputs always precede their consumers."""

    nodes: list = field(default_factory=list)
    # tensors remember this integer rather than the tape itself, so a finished
    # graph is freed by reference counting instead of waiting for the cycle GC
    id: int = field(default_factory=lambda: next(_tape_ids))

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def _node_of(self, t):
        if t._tape != self.id:
            # leaf from this tape's point of view (fresh tensor or stale tape)
            t._tape = self.id
            t._node = len(self.nodes)
            self.nodes.append(Node("leaf", (), None, leaf=t))
        return t._node

    def _push(self, op, inputs, backward):
        ids = tuple(self._node_of(t) if t.requires_grad else None for t in inputs)
        self.nodes.append(Node(op, ids, backward))
        return len(self.nodes) - 1

    def backward(self, root, wrt=None):
        """Reverse-accumulate d(root)/d(leaf) into every reached leaf's ``.grad``.

        Returns the gradients of ``wrt`` (zeros for leaves the root does not
        depend on) when given.
        """
        if root.size != 1:
            raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
        leaves = [n.leaf for n in self.nodes if n.leaf is not None]
        for t in leaves:
            t.grad = np.zeros_like(t.data)
        if root._tape == self.id and root._node is not None:
            buffers = {root._node: np.ones_like(root.data)}
            for node_id in range(len(self.nodes) - 1, -1, -1):
                g = buffers.pop(node_id, None)
                if g is None:
                    continue
                node = self.nodes[node_id]
                if node.leaf is not None:
                    node.leaf.grad = node.leaf.grad + g.reshape(node.leaf.shape)
                    continue
                grads = node.backward(g)
                for inp, gi in zip(node.inputs, grads):
                    if inp is None or gi is None:
                        continue
                    if inp in buffers:
                        buffers[inp] = buffers[inp] + gi
                    else:
                        buffers[inp] = gi
        if wrt is None:
            return None
        return [t.grad if t.grad is not None and t._tape == self.id else np.zeros_like(t.data) for t in wrt]


_local = threading.local()


def _stack():
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape():
    s = _stack()
    return s[-1] if s else None


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else None)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float64 if dtype is None else dtype)
    return Tensor(arr)


def _result(op, data, inputs, backward):
    tape = active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return Tensor(data)
    out = Tensor(data, requires_grad=True)
    out._node = tape._push(op, inputs, backward)
    out._tape = tape.id
    return out


def _pair(a, b):
    # constants adopt the dtype of the tensor operand so float32 graphs stay float32
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, as_tensor(b, dtype=a.dtype)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return as_tensor(a, dtype=b.dtype), b
    return as_tensor(a), as_tensor(b)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)
    return _result("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)
    return _result("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)
    return _result("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = _pair(a, b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def backward(g):
        gb = g / b.data
        return _unbroadcast(gb, a.shape), _unbroadcast(-gb * out, b.shape)

    return _result("div", out, (a, b), backward)


def scale(x, c):
    x = as_tensor(x)
    c = float(c)
    return _result("scale", x.data * c, (x,), lambda g: (g * c,))


# ---------------------------------------------------------------------------
# unary maps
# ---------------------------------------------------------------------------


def sin(x):
    x = as_tensor(x)
    return _result("sin", np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),))


def cos(x):
    x = as_tensor(x)
    return _result("cos", np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),))


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result("exp", out, (x,), lambda g: (g * out,))


def sqrt(x):
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _result("sqrt", out, (x,), lambda g: (g * 0.5 / out,))


def square(x):
    x = as_tensor(x)
    return _result("square", x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def leaky_relu(x, slope=LEAKY_SLOPE):
    x = as_tensor(x)
    # float gain mask (1 or slope); much faster than np.where on large arrays
    gain = (x.data > 0).astype(x.dtype)
    gain *= 1.0 - slope
    gain += slope
    return _result("leaky_relu", x.data * gain, (x,), lambda g: (g * gain,))


def sigmoid(x):
    x = as_tensor(x)
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out[~pos] = ex / (1.0 + ex)

    def back(g):
        # e / (1 + e)^2 with e = exp(-|x|); out * (1 - out) underflows to 0 once out rounds to 1
        e = np.exp(-np.abs(x.data))
        return (g * (e / (1.0 + e) ** 2),)

    return _result("sigmoid", out, (x,), back)


def clamp(x, lo, hi):
    """Clip to ``[lo, hi]``; gradient is zero only where the clip is active."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _result("clamp", np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result("softmax", out, (x,), backward)


# ---------------------------------------------------------------------------
# reductions and products
# ---------------------------------------------------------------------------


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result("sum", np.asarray(out), (x,), backward)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def matmul(a, b):
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _result("matmul", a.data @ b.data, (a, b),
                   lambda g: (g @ b.data.T, a.data.T @ g))


def inner(a, b):
    """Inner product over the last axis; leading axes broadcast."""
    a, b = _pair(a, b)
    if a.ndim == 0 or b.ndim == 0 or a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"inner: incompatible shapes {a.shape} and {b.shape}")
    _broadcast_shape("inner", a, b)
    out = np.einsum("...i,...i->...", a.data, b.data)

    def backward(g):
        g = g[..., None]
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result("inner", out, (a, b), backward)


def norm(x, axis=-1):
    x = as_tensor(x)
    out = np.sqrt((x.data * x.data).sum(axis=axis))

    def backward(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.expand_dims(g / safe, axis) * x.data,)

    return _result("norm", out, (x,), backward)


# ---------------------------------------------------------------------------
# structural
# ---------------------------------------------------------------------------


def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None
    return _result("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def concat(xs: Sequence, axis=-1):
    xs = [as_tensor(x) for x in xs]
    ref = xs[0]
    ax = axis % ref.ndim
    for x in xs[1:]:
        if x.ndim != ref.ndim or any(x.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in xs]} on axis {axis}")
    sizes = [x.shape[ax] for x in xs]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([x.data for x in xs], axis=ax)

    def backward(g):
        sl = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[ax] = slice(lo, hi)
            parts.append(g[tuple(sl)])
        return tuple(parts)

    return _result("concat", out, tuple(xs), backward)


def take(x, index):
    """Gather rows ``x[index]`` along axis 0; index may be any integer array."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise ShapeError(f"take: index out of range for shape {x.shape}")
    out = x.data[index]

    def backward(g):
        flat = g.reshape((index.size,) + x.shape[1:])
        return (_kernels.scatter_add_rows(index.reshape(-1), flat, x.shape[0]),)

    return _result("take", out, (x,), backward)


# ---------------------------------------------------------------------------
# image ops, layout (H, W, C)
# ---------------------------------------------------------------------------


def _im2col(xp, k, stride, ho, wo):
    c = xp.shape[2]
    cols = np.empty((ho, wo, k, k, c), dtype=xp.dtype)
    for dy in range(k):
        for dx in range(k):
            cols[:, :, dy, dx, :] = xp[dy:dy + stride * ho:stride, dx:dx + stride * wo:stride, :]
    return cols.reshape(ho * wo, k * k * c)


def conv2d(x, w, b, stride=1):
    """Zero-padded 2D convolution. ``x``: (H, W, Cin), ``w``: (k, k, Cin, Cout), ``b``: (Cout,).

    Stride 1 keeps the spatial size; stride 2 gives ``ceil(H/2) x ceil(W/2)``.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 3 or w.ndim != 4 or w.shape[0] != w.shape[1] or w.shape[2] != x.shape[2] \
            or b.shape != (w.shape[3],):
        raise ShapeError(f"conv2d: incompatible shapes x={x.shape} w={w.shape} b={b.shape}")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: unsupported stride {stride}")
    k = w.shape[0]
    pad = k // 2
    h, wd, cin = x.shape
    cout = w.shape[3]
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    xp = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0)))
    cols = _im2col(xp, k, stride, ho, wo)
    wmat = w.data.reshape(k * k * cin, cout)
    out = (cols @ wmat + b.data).reshape(ho, wo, cout)

    def backward(g):
        g2 = g.reshape(ho * wo, cout)
        gw = (cols.T @ g2).reshape(w.shape)
        gb = g2.sum(axis=0)
        gcols = (g2 @ wmat.T).reshape(ho, wo, k, k, cin)
        gxp = np.zeros_like(xp)
        for dy in range(k):
            for dx in range(k):
                gxp[dy:dy + stride * ho:stride, dx:dx + stride * wo:stride, :] += gcols[:, :, dy, dx, :]
        gx = gxp[pad:pad + h, pad:pad + wd, :]
        return gx, gw, gb

    return _result("conv2d", out, (x, w, b), backward)


def upsample2x(x):
    """Nearest-neighbour 2x spatial upsampling of an (H, W, C) map."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"upsample2x: expected (H, W, C), got {x.shape}")
    out = np.repeat(np.repeat(x.data, 2, axis=0), 2, axis=1)
    h, w, c = x.shape

    def backward(g):
        return (g.reshape(h, 2, w, 2, c).sum(axis=(1, 3)),)

    return _result("upsample2x", out, (x,), backward)


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------


def gradient(f, x):
    """Analytic gradient of scalar ``f(Tensor)`` at array ``x``."""
    with Tape() as tape:
        xt = Tensor(np.array(x, copy=True), requires_grad=True)
        out = f(xt)
        if not np.all(np.isfinite(out.data)):
            raise ValueError("gradient: non-finite forward value")
        (g,) = tape.backward(out, [xt])
    return out.item(), g


def finite_diff_check(f, x, eps=1e-6, coords=None):
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``coords`` optionally restricts the check to a subset of flat indices.
    """
    if eps <= 0:
        raise ValueError("finite_diff_check: eps must be positive")
    x = np.array(as_tensor(x).data, copy=True)
    _, g = gradient(f, x)
    g = g.reshape(-1)
    flat = x.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    worst = 0.0
    for c in coords:
        old = flat[c]
        flat[c] = old + eps
        fp = f(Tensor(x)).item()
        flat[c] = old - eps
        fm = f(Tensor(x)).item()
        flat[c] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"finite_diff_check: non-finite forward value at coordinate {c}")
        numeric = (fp - fm) / (2 * eps)
        worst = max(worst, abs(g[c] - numeric) / max(1.0, abs(g[c])))
    return worst
