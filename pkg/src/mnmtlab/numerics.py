"""Dense tensors with tape-based reverse-mode differentiation.

Operations record onto the innermost active :class:`Tape`. Outside a tape
block nothing is recorded and results never require gradients, which is how
evaluation and decoding run without building a graph::

    with Tape() as tape:
        loss = cross_entropy_label_smoothed(logits, targets, alpha=0.1)
        backward(loss)

The heavy primitives (softmax, layer norm, smoothed cross entropy) are fused
nodes with hand-written backward passes; composing them from elementwise ops
would multiply the number of tape nodes for no benefit.
"""

from __future__ import annotations

import math
import threading
import weakref

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed primitives.

    Nodes are appended in execution order, which is already a topological
    order of the graph, so the backward sweep is a single reversed pass.
    """

    def __init__(self):
        self.nodes = []
        self.consumed = False
        self._next_id = 0
        self._touched = weakref.WeakValueDictionary()

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def _register(self, t):
        if t.tape is not self:
            t.tape = self
            t.node_id = self._next_id
            self._next_id += 1
            self._touched[id(t)] = t

    def record(self, out, inputs, backward_fn):
        for t in inputs:
            if t.requires_grad:
                self._register(t)
        self._register(out)
        self.nodes.append((out, inputs, backward_fn))

    def backward(self, loss):
        if self.consumed:
            raise ContractError("backward() called twice on the same tape; clear() it first")
        loss.grad = np.ones_like(loss.data)
        for out, inputs, fn in reversed(self.nodes):
            g = out.grad
            if g is None:
                continue
            grads = fn(g)
            for t, gi in zip(inputs, grads):
                if gi is None or not t.requires_grad:
                    continue
                t.grad = gi if t.grad is None else t.grad + gi
        self.consumed = True
        # closures hold activations; release them as soon as gradients exist
        self.nodes = []

    def clear(self):
        """Drop recorded nodes and zero every gradient the tape touched."""
        for t in list(self._touched.values()):
            if t.grad is not None:
                t.grad = np.zeros_like(t.data)
        self.nodes = []
        self.consumed = False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "tape", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = None
        self.tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

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

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _make(data, inputs, backward_fn):
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, inputs, backward_fn)
    return out


def backward(loss):
    """Populate ``.grad`` on every tensor that contributed to ``loss``."""
    if not isinstance(loss, Tensor) or loss.data.ndim != 0:
        shape = getattr(loss, "shape", None)
        raise ContractError(f"backward() needs a scalar tensor, got shape {shape}")
    if loss.tape is None:
        raise ContractError("loss was not recorded on any tape")
    loss.tape.backward(loss)


def zero_grad(tensors):
    for t in tensors:
        t.grad = None


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(a, b):
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype if not isinstance(b, Tensor) else None)
    return a, b


# --------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = _pair(a, b)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = _pair(a, b)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b):
    if isinstance(b, (int, float)):
        a = as_tensor(a)
        c = b
        return _make(a.data * c, (a,), lambda g: (g * c,))
    a, b = _pair(a, b)

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _make(a.data * b.data, (a, b), bw)


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x):
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def clamp_min(x, floor):
    """max(x, floor); the gradient is blocked where the floor is active."""
    x = as_tensor(x)
    keep = x.data >= floor
    return _make(np.where(keep, x.data, floor).astype(x.dtype), (x,), lambda g: (g * keep,))


def relu(x):
    x = as_tensor(x)
    keep = x.data > 0
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """tanh approximation of GELU; smooth, so finite differences stay clean."""
    x = as_tensor(x)
    u = x.data
    t = np.tanh(_GELU_C * (u + 0.044715 * (u * u * u)))
    out = 0.5 * u * (1.0 + t)

    def bw(g):
        du = 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)
        return (g * du,)

    return _make(out, (x,), bw)


# --------------------------------------------------------------------------
# shape


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=()):
    x = as_tensor(x)
    if not axes:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def tensor_sum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), bw)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tensor_sum(x, axis, keepdims), 1.0 / float(n))


# --------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    """Matrix product over the last two axes, with leading-axis broadcasting."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, (a, b), bw)


def linear(x, weight, bias=None):
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# --------------------------------------------------------------------------
# fused primitives


def _check_finite(arr, what):
    if not np.isfinite(arr).all():
        raise NumericError(f"{what}: non-finite input")


def softmax(x, axis=-1):
    x = as_tensor(x)
    if x.shape[axis] < 1:
        raise ContractError("softmax over an empty axis")
    _check_finite(x.data, "softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, (x,), bw)


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    _check_finite(x.data, "log_softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw)


def layer_norm(x, gain, bias, eps=1e-5):
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if d < 2:
        raise ContractError("layer_norm needs a feature axis of size >= 2")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gx = gg = gb = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(x.ndim - 1))
        if gain.requires_grad:
            gg = (g * xhat).sum(axis=lead)
        if bias.requires_grad:
            gb = g.sum(axis=lead)
        return gx, gg, gb

    return _make(out, (x, gain, bias), bw)


def embedding(table, ids):
    """Row lookup ``table[ids]``; gradients scatter-add back into the table."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    n, d = table.shape
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"embedding id out of range [0, {n})")

    def bw(g):
        flat = ids.ravel()
        gt = np.zeros_like(table.data)
        np.add.at(gt, flat, g.reshape(-1, d))
        return (gt,)

    return _make(table.data[ids], (table,), bw)


def dropout(x, p, rng_key, train=True):
    """Inverted dropout; the mask is a pure function of ``rng_key``."""
    x = as_tensor(x)
    if not train or p <= 0.0:
        return x
    rng = np.random.default_rng(rng_key)
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


def cross_entropy_label_smoothed(logits, targets, alpha=0.0, pad_id=0):
    """Mean over non-pad positions of -sum_v q(v) log softmax(logits)(v).

    ``q`` puts ``1 - alpha`` on the target and spreads ``alpha`` uniformly
    over all ``V`` classes, the target included.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"targets {targets.shape} do not match logits {logits.shape}")
    if not 0.0 <= alpha < 1.0:
        raise ContractError("alpha must lie in [0, 1)")
    mask = targets != pad_id
    live = targets[mask]
    if live.size and (live.max() >= V or live.min() < 0):
        raise IndexError(f"target id out of range for vocabulary of size {V}")
    n = int(mask.sum())
    if n == 0:
        raise ContractError("cross entropy over a batch with no non-pad targets")
    _check_finite(logits.data, "cross_entropy")

    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    safe = np.where(mask, targets, 0)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    per_pos = -(1.0 - alpha) * picked - (alpha / V) * logp.sum(axis=-1)
    loss = (per_pos * mask).sum() / n

    def bw(g):
        q = np.full(logp.shape, alpha / V, dtype=logp.dtype)
        np.put_along_axis(q, safe[..., None], (1.0 - alpha) + alpha / V, axis=-1)
        grad = (np.exp(logp) - q) * (mask[..., None] * (g / n))
        return (grad.astype(logits.dtype, copy=False),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), bw)
