"""
    Dense tensors with reverse-mode automatic differentiation.

    Every operation below computes its result with numpy and, when any input
    requires a gradient, records its parents together with a closure mapping
    the output gradient to input gradients. ``backward`` orders the recorded
    graph into a ComputationTape and replays the chain rule in reverse.

    Nothing here is global: a graph lives only as long as the tensors that
    reference it, so separate threads may build and replay separate tapes.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from nse_reader.util import RejectedInput, make_rng

logger = logging.getLogger(__name__)


def _as_float(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype.kind != 'f':
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """A numpy array plus the bookkeeping needed to differentiate through it.

    Leaves (parameters, inputs) have no backward closure; their ``grad`` is
    filled by ``backward`` and accumulates over repeated calls until
    ``zero_grad``.
    """

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None,
                 op="leaf", name=None):
        self.data = _as_float(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.op = op
        self.name = name
        self._parents = parents
        self._backward = backward_fn

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise RejectedInput("item() on a tensor of shape {}".format(self.shape))
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self):
        """A constant copy that gradients do not flow through."""
        return constant(self.data.copy())

    def __repr__(self):
        label = self.name or self.op
        return "Tensor({}, shape={}, requires_grad={})".format(label, self.shape, self.requires_grad)

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def parameter(data, name=None):
    return Tensor(np.array(data, copy=True), requires_grad=True, name=name)


def constant(data, dtype=None):
    return Tensor(_as_float(data, dtype), requires_grad=False, op="const")


def _lift(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return constant(x, dtype)


def _node(data, parents, backward_fn, op):
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, parents=tuple(parents), backward_fn=backward_fn, op=op)


def unbroadcast(grad, to_shape):
    """Sums out the axes that numpy broadcasting added or stretched."""
    if grad.shape == tuple(to_shape):
        return grad
    while grad.ndim > len(to_shape):
        grad = grad.sum(axis=0)
    for dim, extent in enumerate(to_shape):
        if extent == 1 and grad.shape[dim] != 1:
            grad = grad.sum(axis=dim, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

@dataclass
class ComputationTape:
    """Nodes reachable from ``root`` in replay (reverse topological) order."""
    root: Tensor
    nodes: List[Tensor] = field(default_factory=list)

    def replay(self, seed_grad=None):
        if seed_grad is None:
            seed_grad = np.ones_like(self.root.data)
        grads = {id(self.root): seed_grad}
        for node in self.nodes:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = np.array(g, copy=True) if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg


def build_tape(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    order.reverse()
    return ComputationTape(root=root, nodes=order)


def backward(loss):
    """Populates ``grad`` on every leaf reachable from the scalar ``loss``."""
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        shape = loss.shape if isinstance(loss, Tensor) else type(loss).__name__
        raise RejectedInput("backward needs a scalar loss, got {}".format(shape))
    if not loss.requires_grad:
        return build_tape(loss)
    tape = build_tape(loss)
    tape.replay()
    return tape


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

def add(a, b):
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)

    def back(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)
    return _node(a.data + b.data, (a, b), back, "add")


def sub(a, b):
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)

    def back(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)
    return _node(a.data - b.data, (a, b), back, "sub")


def mul(a, b):
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)

    def back(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)
    return _node(a.data * b.data, (a, b), back, "mul")


def tanh(a):
    y = np.tanh(a.data)

    def back(g):
        return (g * (1.0 - y * y),)
    return _node(y, (a,), back, "tanh")


def sigmoid(a):
    """1 / (1 + exp(-x)) without overflow, kept inside the open interval (0, 1)."""
    x = a.data
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    one = np.ones((), dtype=y.dtype)
    y = np.clip(y, np.finfo(y.dtype).tiny, np.nextafter(one, 0 * one))

    def back(g):
        return (g * y * (1.0 - y),)
    return _node(y, (a,), back, "sigmoid")


def log(a, floor=0.0):
    """Natural log of ``a + floor``."""
    shifted = a.data + floor

    def back(g):
        return (g / shifted,)
    return _node(np.log(shifted), (a,), back, "log")


# ---------------------------------------------------------------------------
# Reductions and normalisation
# ---------------------------------------------------------------------------

def reduce_sum(a, axis=None, keepdims=False):
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _node(out, (a,), back, "sum")


def mean(a, axis=None):
    count = a.data.size if axis is None else a.shape[axis]
    return mul(reduce_sum(a, axis=axis), 1.0 / count)


def softmax(x, mask=None, axis=-1):
    """Max-shifted softmax; positions where ``mask`` is 0 get probability 0."""
    v = x.data
    if v.ndim == 0 or v.shape[axis] < 1:
        raise RejectedInput("softmax needs at least one position, got shape {}".format(v.shape))
    if mask is None:
        keep = np.ones(v.shape, dtype=bool)
    else:
        m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
        try:
            keep = np.broadcast_to(m != 0, v.shape)
        except ValueError:
            raise RejectedInput("mask shape {} does not fit {}".format(np.shape(m), v.shape))
        if not np.all(np.any(keep, axis=axis)):
            raise RejectedInput("softmax over a fully masked row")
    mx = np.max(np.where(keep, v, -np.inf), axis=axis, keepdims=True)
    ex = np.exp(np.where(keep, v - mx, -np.inf))
    s = ex / np.sum(ex, axis=axis, keepdims=True)

    def back(g):
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)
    return _node(s, (x,), back, "softmax")


# ---------------------------------------------------------------------------
# Products
# ---------------------------------------------------------------------------

def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise RejectedInput("matmul shapes {} and {} do not agree".format(a.shape, b.shape))
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as e:
        raise RejectedInput("matmul shapes {} and {}: {}".format(a.shape, b.shape, e))

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)
    return _node(out, (a, b), back, "matmul")


def einsum(subscripts, a, b):
    """Two-operand einsum without ellipsis or repeated in-operand indices.

    Every index of an operand must appear in the output or in the other
    operand, which is what makes the gradient another einsum.
    """
    try:
        ins, out_sub = subscripts.replace(" ", "").split("->")
        sa, sb = ins.split(",")
    except ValueError:
        raise RejectedInput("einsum subscripts must look like 'ab,bc->ac': {}".format(subscripts))
    for s, other in ((sa, sb), (sb, sa)):
        if len(set(s)) != len(s) or "." in s:
            raise RejectedInput("unsupported einsum operand {!r}".format(s))
        for ch in s:
            if ch not in out_sub and ch not in other:
                raise RejectedInput("index {!r} of {!r} is summed alone".format(ch, s))
    try:
        out = np.einsum(subscripts, a.data, b.data)
    except ValueError as e:
        raise RejectedInput("einsum {} on {} and {}: {}".format(subscripts, a.shape, b.shape, e))

    def back(g):
        ga = np.einsum("{},{}->{}".format(out_sub, sb, sa), g, b.data)
        gb = np.einsum("{},{}->{}".format(out_sub, sa, sb), g, a.data)
        return ga, gb
    return _node(out, (a, b), back, "einsum")


# ---------------------------------------------------------------------------
# Shape plumbing
# ---------------------------------------------------------------------------

def concat(tensors: Sequence[Tensor], axis=-1):
    tensors = list(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise RejectedInput("concat: {}".format(e))
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return np.split(g, cuts, axis=axis)
    return _node(out, tensors, back, "concat")


def stack(tensors: Sequence[Tensor], axis=0):
    tensors = list(tensors)
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise RejectedInput("stack: {}".format(e))

    def back(g):
        return [np.take(g, i, axis=axis) for i in range(len(tensors))]
    return _node(out, tensors, back, "stack")


def _is_basic(idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(p is Ellipsis or p is None or isinstance(p, (slice, int, np.integer)) for p in parts)


def getitem(a, idx):
    out = a.data[idx]
    basic = _is_basic(idx)

    def back(g):
        z = np.zeros_like(a.data)
        if basic:
            z[idx] = g
        else:
            np.add.at(z, idx, g)
        return (z,)
    return _node(np.array(out, copy=True), (a,), back, "getitem")


def take(table, ids):
    """Rows of a 2-D ``table`` for an integer array ``ids`` of any shape."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise RejectedInput("take needs integer ids, got {}".format(ids.dtype))
    rows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        raise RejectedInput("token id out of range [0, {})".format(rows))
    out = table.data[ids]

    def back(g):
        z = np.zeros_like(table.data)
        np.add.at(z, ids, g)
        return (z,)
    return _node(out, (table,), back, "take")


def swapaxes(a, ax1, ax2):
    def back(g):
        return (np.swapaxes(g, ax1, ax2),)
    return _node(np.swapaxes(a.data, ax1, ax2).copy(), (a,), back, "swapaxes")


def transpose(a, axes=None):
    order = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    if sorted(order) != list(range(a.ndim)):
        raise RejectedInput("axes {} do not permute a tensor of rank {}".format(axes, a.ndim))
    inverse = tuple(np.argsort(order))

    def back(g):
        return (np.transpose(g, inverse),)
    return _node(np.transpose(a.data, order).copy(), (a,), back, "transpose")


def reshape(a, shape):
    def back(g):
        return (g.reshape(a.shape),)
    return _node(a.data.reshape(shape), (a,), back, "reshape")


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    op: str
    max_rel_error: float
    max_abs_error: float
    probes: int

    def ok(self, tol=1e-4):
        return self.max_rel_error < tol


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps=1e-5, probes=100, seed=0,
               floor=1e-8, name=None):
    """Compares the taped gradient of scalar ``f`` at ``x`` with central differences.

    Relative error per probed coordinate is |a - n| / max(|a|, |n|, floor).
    """
    x.zero_grad()
    out = f(x)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise RejectedInput("grad_check needs a scalar-valued function")
    backward(out)
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)

    n = x.data.size
    rng = make_rng(seed)
    count = min(int(probes), n)
    coords = rng.choice(n, size=count, replace=False) if count < n else np.arange(n)

    if not x.data.flags.c_contiguous:
        x.data = np.ascontiguousarray(x.data)
    flat = x.data.reshape(-1)
    max_rel = max_abs = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x).item()
        flat[i] = orig - eps
        fm = f(x).item()
        flat[i] = orig
        num = (fp - fm) / (2.0 * eps)
        ana = float(analytic.reshape(-1)[i])
        abs_err = abs(ana - num)
        max_abs = max(max_abs, abs_err)
        max_rel = max(max_rel, abs_err / max(abs(ana), abs(num), floor))
    report = GradCheckReport(op=name or getattr(f, "__name__", "f"), max_rel_error=max_rel,
                             max_abs_error=max_abs, probes=int(count))
    logger.debug("grad_check %s: rel=%.3g abs=%.3g over %d probes", report.op,
                 report.max_rel_error, report.max_abs_error, report.probes)
    return report
