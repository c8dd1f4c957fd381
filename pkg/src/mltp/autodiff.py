"""Dense tensor ops with tape-based reverse-mode differentiation.

Every backward rule is written in terms of the same differentiable ops it
differentiates, so gradients produced with ``create_graph=True`` are graph
nodes themselves and can be differentiated again (double backward).

Values are plain ``numpy.ndarray`` objects of dtype float32 or float64; a
:class:`Node` wraps one value together with the record needed to
differentiate it.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import InvalidInputError, PrecisionError

Tensor = np.ndarray

_FLOATS = (np.dtype(np.float32), np.dtype(np.float64))
_ids = itertools.count()
_state = threading.local()


def is_recording():
    return getattr(_state, "record", True)


def is_deterministic():
    return getattr(_state, "deterministic", False)


@contextlib.contextmanager
def _set_state(name, flag):
    prev = getattr(_state, name, None)
    setattr(_state, name, flag)
    try:
        yield
    finally:
        if prev is None:
            delattr(_state, name)
        else:
            setattr(_state, name, prev)


def no_grad():
    """Context in which ops produce constants (nothing is recorded)."""
    return _set_state("record", False)


def enable_grad(flag=True):
    return _set_state("record", flag)


def deterministic(flag=True):
    """Context selecting fixed left-to-right summation for reductions."""
    return _set_state("deterministic", flag)


def set_deterministic(flag):
    _state.deterministic = bool(flag)


class Node:
    """A value in the computation graph.

    Leaves are created directly (``Node(x, requires_grad=True)``); interior
    nodes are created by ops and remember their parents and backward rule.
    The wrapped array is read-only.
    """

    __slots__ = ("value", "parents", "backward", "op", "requires_grad", "id")
    __array_priority__ = 1000

    def __init__(self, value, requires_grad=False, dtype=None):
        arr = np.array(value, dtype=dtype, copy=True)
        if arr.dtype not in _FLOATS:
            arr = arr.astype(np.float64)
        arr.flags.writeable = False
        self.value = arr
        self.parents = ()
        self.backward = None
        self.op = "leaf" if requires_grad else "const"
        self.requires_grad = bool(requires_grad)
        self.id = next(_ids)

    @classmethod
    def _from_op(cls, value, parents, backward, op):
        node = cls.__new__(cls)
        value = np.asarray(value)
        value.flags.writeable = False
        node.value = value
        node.id = next(_ids)
        if is_recording() and any(p.requires_grad for p in parents):
            node.parents = tuple(parents)
            node.backward = backward
            node.op = op
            node.requires_grad = True
        else:
            node.parents = ()
            node.backward = None
            node.op = "const"
            node.requires_grad = False
        return node

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.shape}, dtype={self.dtype})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def T(self):
        return transpose(self)

    def item(self):
        return float(self.value.item())

    def numpy(self):
        return self.value

    def detach(self):
        return Node(self.value)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, exponent):
        return power(self, exponent)


def constant(value, dtype=None):
    return Node(value, dtype=dtype)


def _lift(x, dtype):
    if isinstance(x, Node):
        return x
    arr = np.asarray(x)
    if arr.dtype in _FLOATS and arr.ndim > 0 and arr.dtype != dtype:
        raise PrecisionError(f"operand precision {arr.dtype} does not match {dtype}")
    node = Node.__new__(Node)
    arr = arr.astype(dtype, copy=True)
    arr.flags.writeable = False
    node.value = arr
    node.parents = ()
    node.backward = None
    node.op = "const"
    node.requires_grad = False
    node.id = next(_ids)
    return node


def _pair(a, b):
    if isinstance(a, Node) and isinstance(b, Node):
        if a.dtype != b.dtype:
            raise PrecisionError(f"mixed precision operands: {a.dtype} and {b.dtype}")
        return a, b
    if isinstance(a, Node):
        return a, _lift(b, a.dtype)
    if isinstance(b, Node):
        return _lift(a, b.dtype), b
    a = Node(a)
    return a, _lift(b, a.dtype)


def _as_node(x):
    return x if isinstance(x, Node) else Node(x)


# ---------------------------------------------------------------- reductions

def _reduce_sum(x, axes, keepdims=False):
    """Sum over ``axes``; sequential left-to-right in deterministic mode."""
    axes = tuple(sorted(a % x.ndim for a in axes)) if x.ndim else ()
    if not axes:
        return x.copy()
    if not is_deterministic():
        return np.sum(x, axis=axes, keepdims=keepdims)
    out = x
    for ax in axes:
        acc = np.take(out, 0, axis=ax).copy()
        for i in range(1, out.shape[ax]):
            acc += np.take(out, i, axis=ax)
        out = np.expand_dims(acc, ax)
    if not keepdims:
        out = out.reshape([d for i, d in enumerate(x.shape) if i not in axes])
    return out


def _normalize_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    x = _as_node(x)
    axes = _normalize_axis(axis, x.ndim)
    value = _reduce_sum(x.value, axes, keepdims)
    kept_shape = tuple(1 if i in axes else d for i, d in enumerate(x.shape))

    def backward(g, out, needs):
        return (broadcast_to(reshape(g, kept_shape), x.shape),)

    return Node._from_op(value, (x,), backward, "sum")


def mean(x, axis=None, keepdims=False):
    x = _as_node(x)
    axes = _normalize_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum(x, axes, keepdims), 1.0 / count)


def broadcast_to(x, shape):
    x = _as_node(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    value = np.broadcast_to(x.value, shape).copy()

    def backward(g, out, needs):
        return (sum_to(g, x.shape),)

    return Node._from_op(value, (x,), backward, "broadcast_to")


def sum_to(x, shape):
    """Sum ``x`` down to ``shape`` (inverse of numpy broadcasting)."""
    x = _as_node(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, d in enumerate(shape) if d == 1 and x.shape[lead + i] != 1)
    value = _reduce_sum(x.value, axes, keepdims=True)
    value = value.reshape(shape)

    def backward(g, out, needs):
        return (broadcast_to(g, x.shape),)

    return Node._from_op(value, (x,), backward, "sum_to")


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _pair(a, b)

    def backward(g, out, needs):
        return (sum_to(g, a.shape) if needs[0] else None,
                sum_to(g, b.shape) if needs[1] else None)

    return Node._from_op(a.value + b.value, (a, b), backward, "add")


def sub(a, b):
    a, b = _pair(a, b)

    def backward(g, out, needs):
        return (sum_to(g, a.shape) if needs[0] else None,
                sum_to(neg(g), b.shape) if needs[1] else None)

    return Node._from_op(a.value - b.value, (a, b), backward, "sub")


def mul(a, b):
    a, b = _pair(a, b)

    def backward(g, out, needs):
        return (sum_to(mul(g, b), a.shape) if needs[0] else None,
                sum_to(mul(g, a), b.shape) if needs[1] else None)

    return Node._from_op(a.value * b.value, (a, b), backward, "mul")


def div(a, b):
    a, b = _pair(a, b)
    return mul(a, power(b, -1.0))


def neg(a):
    a = _as_node(a)

    def backward(g, out, needs):
        return (neg(g),)

    return Node._from_op(-a.value, (a,), backward, "neg")


def power(a, exponent):
    """``a ** exponent`` for a constant real exponent."""
    a = _as_node(a)
    exponent = float(exponent)
    if exponent == 1.0:
        return a

    def backward(g, out, needs):
        if exponent == 0.0:
            return (mul(g, 0.0),)
        return (mul(g, mul(power(a, exponent - 1.0), exponent)),)

    value = np.power(a.value, a.dtype.type(exponent))
    return Node._from_op(value, (a,), backward, "pow")


def exp(a):
    a = _as_node(a)

    def backward(g, out, needs):
        return (mul(g, out),)

    return Node._from_op(np.exp(a.value), (a,), backward, "exp")


def log(a):
    a = _as_node(a)

    def backward(g, out, needs):
        return (div(g, a),)

    return Node._from_op(np.log(a.value), (a,), backward, "log")


def relu(a):
    a = _as_node(a)
    mask = (a.value > 0).astype(a.dtype)

    def backward(g, out, needs):
        return (mul(g, mask),)

    return Node._from_op(a.value * mask, (a,), backward, "relu")


def sigmoid(a):
    a = _as_node(a)
    v = a.value
    value = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))),
                     np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v)))).astype(a.dtype)

    def backward(g, out, needs):
        return (mul(g, mul(out, sub(1.0, out))),)

    return Node._from_op(value, (a,), backward, "sigmoid")


def tanh(a):
    a = _as_node(a)

    def backward(g, out, needs):
        return (mul(g, sub(1.0, mul(out, out))),)

    return Node._from_op(np.tanh(a.value), (a,), backward, "tanh")


# ---------------------------------------------------------------- shape ops

def reshape(a, shape):
    a = _as_node(a)
    shape = tuple(int(s) for s in shape)
    value = a.value.reshape(shape)
    if value.shape == a.shape:
        return a

    def backward(g, out, needs):
        return (reshape(g, a.shape),)

    return Node._from_op(value, (a,), backward, "reshape")


def flatten(a):
    """Collapse all but the leading (batch) axis."""
    a = _as_node(a)
    return reshape(a, (a.shape[0], int(np.prod(a.shape[1:], dtype=np.int64))))


def transpose(a):
    a = _as_node(a)
    if a.ndim != 2:
        raise InvalidInputError(f"transpose expects a matrix, got shape {a.shape}")

    def backward(g, out, needs):
        return (transpose(g),)

    return Node._from_op(a.value.T.copy(), (a,), backward, "transpose")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise InvalidInputError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise InvalidInputError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")

    def backward(g, out, needs):
        return (matmul(g, transpose(b)) if needs[0] else None,
                matmul(transpose(a), g) if needs[1] else None)

    return Node._from_op(a.value @ b.value, (a, b), backward, "matmul")


def _conv_geometry(x_shape, k_shape, stride, pad):
    n, c, h, w = x_shape
    f, kc, kh, kw = k_shape
    if kc != c:
        raise InvalidInputError(f"conv2d channel mismatch: input {c}, kernel {kc}")
    if stride < 1 or pad < 0:
        raise InvalidInputError("conv2d needs stride >= 1 and pad >= 0")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise InvalidInputError(f"kernel {kh}x{kw} larger than padded input {h}x{w}")
    if (h + 2 * pad - kh) % stride or (w + 2 * pad - kw) % stride:
        raise InvalidInputError(
            f"conv2d output size not integral for H={h}, W={w}, k={kh}x{kw}, "
            f"stride={stride}, pad={pad}")
    return (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1


def conv2d(x, kernel, stride=1, pad=0):
    """2-D cross-correlation of ``N×C×H×W`` input with ``F×C×kh×kw`` kernel."""
    x, kernel = _pair(x, kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise InvalidInputError("conv2d expects 4-D input and kernel")
    ho, wo = _conv_geometry(x.shape, kernel.shape, stride, pad)
    n = x.shape[0]
    f, c, kh, kw = kernel.shape
    cols = kernels.im2col(x.value, kh, kw, stride, pad)
    value = np.matmul(kernel.value.reshape(f, -1), cols).reshape(n, f, ho, wo)

    def backward(g, out, needs):
        return (conv2d_input_grad(g, kernel, x.shape, stride, pad) if needs[0] else None,
                conv2d_kernel_grad(x, g, kernel.shape, stride, pad) if needs[1] else None)

    return Node._from_op(value, (x, kernel), backward, "conv2d")


def conv2d_input_grad(g, kernel, x_shape, stride, pad):
    """Adjoint of :func:`conv2d` with respect to its input (bilinear in g, kernel)."""
    g, kernel = _pair(g, kernel)
    n, f, ho, wo = g.shape
    _, c, kh, kw = kernel.shape
    cols = np.matmul(kernel.value.reshape(f, -1).T, g.value.reshape(n, f, ho * wo))
    value = kernels.col2im(cols, tuple(x_shape), kh, kw, stride, pad)

    def backward(h, out, needs):
        return (conv2d(h, kernel, stride, pad) if needs[0] else None,
                conv2d_kernel_grad(h, g, kernel.shape, stride, pad) if needs[1] else None)

    return Node._from_op(value, (g, kernel), backward, "conv2d_input_grad")


def conv2d_kernel_grad(x, g, k_shape, stride, pad):
    """Adjoint of :func:`conv2d` with respect to its kernel (bilinear in x, g)."""
    x, g = _pair(x, g)
    n, f, ho, wo = g.shape
    _, c, kh, kw = k_shape
    cols = kernels.im2col(x.value, kh, kw, stride, pad)
    per_sample = np.matmul(g.value.reshape(n, f, ho * wo), cols.transpose(0, 2, 1))
    value = _reduce_sum(per_sample, (0,)).reshape(k_shape)

    def backward(h, out, needs):
        return (conv2d_input_grad(g, h, x.shape, stride, pad) if needs[0] else None,
                conv2d(x, h, stride, pad) if needs[1] else None)

    return Node._from_op(value, (x, g), backward, "conv2d_kernel_grad")


def max_pool2d(x, window=2, stride=None):
    """Windowed max over the spatial axes of an ``N×C×H×W`` input.

    Gradient goes to the first maximal element (row-major) of each window.
    """
    x = _as_node(x)
    stride = window if stride is None else stride
    if x.ndim != 4:
        raise InvalidInputError("max_pool2d expects a 4-D input")
    if window < 1 or stride < 1:
        raise InvalidInputError("max_pool2d needs window >= 1 and stride >= 1")
    h, w = x.shape[2:]
    if window > h or window > w or (h - window) % stride or (w - window) % stride:
        raise InvalidInputError(
            f"max_pool2d output size not integral for {h}x{w}, window={window}, stride={stride}")
    value, idx = kernels.pool_argmax(x.value, window, stride)
    return _pool_gather(x, idx, value)


def _pool_gather(x, idx, value=None):
    if value is None:
        value = kernels.pool_gather(x.value, idx)
    shape = x.shape

    def backward(g, out, needs):
        return (_pool_scatter(g, idx, shape),)

    return Node._from_op(value, (x,), backward, "pool_gather")


def _pool_scatter(g, idx, shape):
    value = kernels.pool_scatter(g.value, idx, shape[2], shape[3])

    def backward(h, out, needs):
        return (_pool_gather(h, idx),)

    return Node._from_op(value, (g,), backward, "pool_scatter")


# ---------------------------------------------------------------- losses

def softmax_cross_entropy(logits, labels):
    """Batch-mean of ``-log softmax(logits)[label]``, max-shifted for stability."""
    logits = _as_node(logits)
    if logits.ndim != 2:
        raise InvalidInputError(f"logits must be N×K, got shape {logits.shape}")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise InvalidInputError(f"expected {n} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(labels == np.round(labels)):
            raise InvalidInputError("labels must be integer class indices")
        labels = labels.astype(np.int64)
    if n and (labels.min() < 0 or labels.max() >= k):
        raise InvalidInputError(f"labels must lie in [0, {k})")
    shift = logits.value.max(axis=1, keepdims=True)
    z = sub(logits, shift)
    lse = log(sum(exp(z), axis=1))
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(n), labels] = 1
    picked = sum(mul(z, onehot), axis=1)
    return mean(sub(lse, picked))


def squared_error(pred, target):
    """Batch-mean of the per-sample summed squared error."""
    pred = _as_node(pred)
    target = np.asarray(target, dtype=pred.dtype).reshape(pred.shape)
    d = sub(pred, target)
    per_sample = sum(mul(d, d), axis=tuple(range(1, d.ndim))) if d.ndim > 1 else mul(d, d)
    return mean(per_sample)


# ---------------------------------------------------------------- gradients

@dataclass
class Tape:
    """Nodes relevant to one gradient computation, in creation order.

    Only nodes that lie on a path from some ``wrt`` node to the output are
    kept; every node's recorded parents that are kept precede it.
    """

    nodes: list = field(default_factory=list)

    @classmethod
    def trace(cls, output, wrt=None):
        targets = None if wrt is None else {id(w) for w in wrt}
        needed = {}
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in needed and not expanded:
                continue
            if not expanded:
                if not node.requires_grad:
                    needed[id(node)] = (node, False)
                    continue
                stack.append((node, True))
                for p in node.parents:
                    if id(p) not in needed:
                        stack.append((p, False))
            else:
                hit = targets is None or id(node) in targets
                hit = hit or any(needed[id(p)][1] for p in node.parents)
                needed[id(node)] = (node, hit)
        kept = [n for n, hit in needed.values() if hit]
        kept.sort(key=lambda n: n.id)
        return cls(kept)


def grad(output, wrt, create_graph=False):
    """Gradients of scalar ``output`` with respect to each node in ``wrt``.

    With ``create_graph`` the returned nodes are recorded and can be
    differentiated again. A ``wrt`` node the output does not depend on gets
    a zero gradient of matching shape.
    """
    output = _as_node(output)
    wrt = list(wrt)
    if output.size != 1:
        raise InvalidInputError(f"grad needs a scalar output, got shape {output.shape}")
    tape = Tape.trace(output, wrt)
    on_tape = {id(n) for n in tape.nodes}
    keep = {id(w) for w in wrt}
    grads = {}
    if id(output) in on_tape:
        grads[id(output)] = _lift(np.ones(output.shape), output.dtype)
    with enable_grad(create_graph):
        for node in reversed(tape.nodes):
            g = grads.get(id(node)) if id(node) in keep else grads.pop(id(node), None)
            if g is None or not node.parents:
                continue
            needs = tuple(id(p) in on_tape for p in node.parents)
            for p, pg in zip(node.parents, node.backward(g, node, needs)):
                if pg is None or id(p) not in on_tape:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)
    result = []
    for w in wrt:
        g = grads.get(id(w))
        if g is None:
            g = _lift(np.zeros(w.shape), w.dtype)
        elif not create_graph and g.requires_grad:
            g = g.detach()
        result.append(g)
    return result
