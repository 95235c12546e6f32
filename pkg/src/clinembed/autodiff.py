"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op reads ``Tensor.data`` (a numpy array), computes its output, and, when
a :class:`Tape` is active and at least one input requires a gradient, appends a
node holding a backward closure.  :func:`backward` walks the tape in exact
reverse insertion order, so gradients are deterministic.

Broadcasting follows numpy rules for ``add`` and ``mul`` and is undone in the
backward pass by summing over the broadcast axes.
"""

from __future__ import annotations

import builtins
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_ids = itertools.count(1)
_active: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "node_id", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids) if requires_grad else None
        self.name = name

    @classmethod
    def _from_op(cls, arr, requires_grad):
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.node_id = next(_ids) if requires_grad else None
        t.name = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self):
        return transpose(self)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(data):
    return Tensor(data)


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


@dataclass
class Node:
    kind: str
    input_ids: tuple
    output_id: int
    backward: Callable = field(repr=False)


class Tape:
    """Ordered record of differentiable ops.

    Used as a context manager; ops executed inside the ``with`` block that
    touch a ``requires_grad`` tensor are appended here.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.pop()
        return False

    def __len__(self):
        return len(self.nodes)


def _record(kind, inputs, out_arr, backward_fn):
    if not np.all(np.isfinite(out_arr)):
        raise NumericError(f"non-finite output from {kind}")
    tape = _active[-1] if _active else None
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._from_op(out_arr, needs)
    if needs:
        ids = tuple(t.node_id if t.requires_grad else None for t in inputs)
        tape.nodes.append(Node(kind, ids, out.node_id, backward_fn))
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast {a.shape} with {b.shape}") from None


# --- ops -------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch dims: {a.shape} @ {b.shape}") from None
    A, B = a.data, b.data
    if B.ndim == 2 and A.ndim > 2:
        # stacked rows times a weight matrix: fold the batch axes into one
        k, p = B.shape
        A2 = A.reshape(-1, k)
        out = (A2 @ B).reshape(A.shape[:-1] + (p,))

        def back(g):
            g2 = g.reshape(-1, p)
            return (g2 @ B.T).reshape(A.shape), A2.T @ g2

        return _record("matmul", (a, b), out, back)
    out = A @ B

    def back(g):
        return (
            _unbroadcast(g @ np.swapaxes(B, -1, -2), A.shape),
            _unbroadcast(np.swapaxes(A, -1, -2) @ g, B.shape),
        )

    return _record("matmul", (a, b), out, back)


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _record("add", (a, b), a.data + b.data, back)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scale", (a,), a.data * c, lambda g: (g * c,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a, b)
    A, B = a.data, b.data

    def back(g):
        return _unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)

    return _record("mul", (a, b), A * B, back)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    arrs = [t.data for t in tensors]
    try:
        out = np.concatenate(arrs, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    sizes = [a.shape[axis] for a in arrs]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record("concat", tuple(tensors), out, back)


def _is_basic(key):
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, type(None), type(Ellipsis))) for k in parts)


def index(a: Tensor, key) -> Tensor:
    """Slice or fancy-index; the backward pass scatter-adds into zeros."""
    try:
        out = a.data[key]
    except IndexError as exc:
        raise ShapeError(f"index: {exc}") from None
    shape = a.shape
    basic = _is_basic(key)

    def back(g):
        full = np.zeros(shape)
        if basic:
            full[key] += g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _record("slice", (a,), np.array(out, dtype=np.float64), back)


def embedding(table: Tensor, idx) -> Tensor:
    """Row lookup ``table[idx]`` for an integer array of any shape."""
    idx = np.asarray(idx)
    if table.ndim != 2:
        raise ShapeError("embedding table must be 2-D")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError("embedding index out of range")
    shape = table.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _record("embedding", (table,), table.data[idx], back)


def sum(a: Tensor, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", (a,), np.sum(a.data, axis=axis, keepdims=keepdims), back)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape
    n = a.size if axis is None else np.prod([shape[i] for i in np.atleast_1d(axis)])
    inv = 1.0 / float(n)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * inv, shape).copy(),)

    return _record("mean", (a,), np.mean(a.data, axis=axis, keepdims=keepdims), back)


def max(a: Tensor, axis: int = -1) -> Tensor:  # noqa: A001
    """Max over one axis; ties resolve to the lowest index."""
    arg = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, arg, axis=axis).squeeze(axis)
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        np.put_along_axis(full, arg, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _record("max", (a,), out, back)


def softmax(a: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Softmax; entries where boolean ``mask`` is False come out exactly 0."""
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(mask, x.shape)
        x = np.where(mask, x, -np.inf)
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    y = e / np.sum(e, axis=axis, keepdims=True)

    def back(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _record("softmax", (a,), y, back)


def log_softmax(a: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Log-softmax; positions excluded by ``mask`` are returned as 0 and get no gradient."""
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(mask, x.shape)
        x = np.where(mask, x, -np.inf)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    if mask is not None:
        out = np.where(mask, out, 0.0)
        p = np.where(mask, p, 0.0)

    def back(g):
        if mask is not None:
            g = np.where(mask, g, 0.0)
        return (g - p * np.sum(g, axis=axis, keepdims=True),)

    return _record("log_softmax", (a,), out, back)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    n = x.shape[-1]
    if gain.shape != (n,) or shift.shape != (n,):
        raise ShapeError("layer_norm gain/shift must match the last axis")
    X = x.data
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    G = gain.data
    out = xhat * G + shift.data

    def back(g):
        gx_hat = g * G
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * np.mean(gx_hat * xhat, axis=-1, keepdims=True))
        gg = _unbroadcast(g * xhat, G.shape)
        gs = _unbroadcast(g, shift.shape)
        return gx, gg, gs

    return _record("layer_norm", (x, gain, shift), out, back)


def normalized(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """The pre-affine part of layer-norm, for inspection."""
    xc = x - x.mean(axis=-1, keepdims=True)
    return xc / np.sqrt(np.mean(xc * xc, axis=-1, keepdims=True) + eps)


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _record("relu", (a,), np.where(pos, a.data, 0.0), lambda g: (g * pos,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def back(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _record("gelu", (a,), out, back)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _record("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record("transpose", (a,), np.transpose(a.data, axes), lambda g: (np.transpose(g, inverse),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {exc}") from None
    return _record("reshape", (a,), out, lambda g: (g.reshape(old),))


OPS = {
    "matmul": matmul,
    "add": add,
    "scale": scale,
    "mul": mul,
    "concat": concat,
    "slice": index,
    "embedding": embedding,
    "sum": sum,
    "mean": mean,
    "max": max,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "layer_norm": layer_norm,
    "relu": relu,
    "gelu": gelu,
    "sigmoid": sigmoid,
    "transpose": transpose,
    "reshape": reshape,
}


def op_apply(kind: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = OPS[kind]
    except KeyError:
        raise ContractError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


# --- differentiation -------------------------------------------------------


class GradMap(dict):
    """node_id -> gradient array; also indexable by the Tensor itself."""

    def __getitem__(self, key):
        if isinstance(key, Tensor):
            key = key.node_id
        return dict.__getitem__(self, key)

    def get(self, key, default=None):
        if isinstance(key, Tensor):
            key = key.node_id
        return dict.get(self, key, default)

    def __contains__(self, key):
        if isinstance(key, Tensor):
            key = key.node_id
        return dict.__contains__(self, key)


def backward(tape: Tape, loss: Tensor) -> GradMap:
    if loss.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    grads = GradMap()
    if not loss.requires_grad:
        return grads
    grads[loss.node_id] = np.ones(loss.shape)
    for node in reversed(tape.nodes):
        g = grads.get(node.output_id)
        if g is None:
            continue
        for nid, gi in zip(node.input_ids, node.backward(g)):
            if nid is None:
                continue
            if nid in grads:
                grads[nid] = grads[nid] + gi
            else:
                grads[nid] = gi
    return grads


def grad_check(f: Callable[[], Tensor], leaves: Sequence[Tensor], h: float = 1e-5,
               max_entries: int | None = None, seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` rebuilds the graph from the current leaf values each call.  With
    ``max_entries`` only a seeded random subset of each leaf's entries is probed.
    """
    if not 0 < h <= 1e-3:
        raise ContractError(f"finite-difference step must lie in (0, 1e-3], got {h}")
    first = f().data.copy()
    if not np.array_equal(first, f().data):
        raise ContractError("graph builder is not deterministic")
    with Tape() as tape:
        loss = f()
    grads = backward(tape, loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for leaf in leaves:
        analytic = grads.get(leaf)
        if analytic is None:
            analytic = np.zeros(leaf.shape)
        size = leaf.size
        entries = np.arange(size)
        if max_entries is not None and size > max_entries:
            entries = np.sort(rng.choice(size, size=max_entries, replace=False))
        for i in entries:
            pos = np.unravel_index(i, leaf.shape)
            old = leaf.data[pos]
            leaf.data[pos] = old + h
            up = float(f().data.reshape(-1)[0])
            leaf.data[pos] = old - h
            down = float(f().data.reshape(-1)[0])
            leaf.data[pos] = old
            num = (up - down) / (2 * h)
            a = analytic[pos]
            err = abs(a - num) / builtins.max(1.0, abs(a), abs(num))
            worst = builtins.max(worst, err)
    return worst



def named_grads(params: dict, grads: GradMap) -> dict:
    """Re-key a gradient map by parameter name; missing entries are omitted."""
    out = {}
    for name, p in params.items():
        g = grads.get(p.node_id) if p.requires_grad else None
        if g is not None:
            out[name] = g
    return out
