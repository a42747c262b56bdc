"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations only record onto a tape while one is active::

    with Tape() as tape:
        y = (x * x).sum()
    (dx,) = tape.gradient(y, [x])

Outside a tape every operation is a plain numpy computation, which is what
inference and evaluation use.
"""

from __future__ import annotations

import threading

import numpy as np
from scipy.special import ndtr

from .exceptions import ConfigurationError, ContractError, DimensionError

_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A float64 array that may participate in differentiation."""

    __slots__ = ("data", "requires_grad", "name", "_is_leaf", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._is_leaf = True

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
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.data.shape[0]

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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended in execution order, so walking the list backwards is
    a valid reverse topological order.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:
            stack.remove(self)
        return False

    def record(self, out, parents, vjp):
        self.nodes.append((out, parents, vjp))

    def backward(self, loss):
        """Return a ``{leaf tensor: gradient array}`` map for every tracked leaf.

        Untracked tensors never appear in the map.
        """
        loss = as_tensor(loss)
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        if loss.requires_grad and loss._is_leaf:
            leaves[id(loss)] = loss
        for out, parents, vjp in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            pgrads = vjp(g)
            for parent, pg in zip(parents, pgrads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if parent._is_leaf:
                    leaves[key] = parent
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return {leaf: grads.get(key, np.zeros_like(leaf.data)) for key, leaf in leaves.items()}

    def gradient(self, loss, sources):
        """Gradients of ``loss`` for each tensor in ``sources`` (zeros if unreached)."""
        gmap = self.backward(loss)
        return [gmap.get(s, np.zeros_like(s.data)) for s in sources]


def backward(loss, tape=None):
    tape = tape if tape is not None else active_tape()
    if tape is None:
        raise ContractError("backward called with no active tape")
    return tape.backward(loss)


def _make(value, parents, vjp):
    """Wrap an op result, recording it when a tape is active and any input tracks."""
    out = Tensor.__new__(Tensor)
    out.data = value
    out.name = None
    out._is_leaf = True
    out.requires_grad = False
    tape = active_tape()
    if tape is not None:
        tracked = [p for p in parents if p.requires_grad]
        if tracked:
            out.requires_grad = True
            out._is_leaf = False
            tape.record(out, parents, vjp)
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
    return grad.reshape(shape)


# ---------------------------------------------------------------- arithmetic


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), vjp)


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, exponent):
    a = as_tensor(a)
    p = float(exponent)
    ad = a.data
    return _make(ad**p, (a,), lambda g: (g * p * ad ** (p - 1.0),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def abs_(a):
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,))


def stop_gradient(a):
    return Tensor(_data(a))


# ------------------------------------------------------------------ algebra


def matmul(a, b):
    """Matrix product with numpy batch broadcasting; both operands need ndim >= 2."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), vjp)


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), vjp)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def swapaxes(a, i, j):
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def getitem(a, index):
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), vjp)


def take_rows(a, rows):
    """Rows ``a[rows]`` for an integer index array; faster than generic getitem."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.intp)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, rows, g)
        return (full,)

    return _make(a.data[rows], (a,), vjp)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), vjp)


# -------------------------------------------------------------- activations


def gelu(x):
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF."""
    x = as_tensor(x)
    xd = x.data
    cdf = ndtr(xd)
    pdf = np.exp(-0.5 * xd * xd) / np.sqrt(2.0 * np.pi)
    return _make(xd * cdf, (x,), lambda g: (g * (cdf + xd * pdf),))


def softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), vjp)


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def vjp(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), vjp)


def layer_norm(x, gain=None, bias=None, eps=1e-5):
    """Normalize over the last axis with biased variance, then apply the affine."""
    x = as_tensor(x)
    if x.shape[-1] < 1:
        raise DimensionError("layer_norm needs a non-empty last axis")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    out = _make(xhat, (x,), vjp)
    if gain is not None:
        out = out * gain
    if bias is not None:
        out = out + bias
    return out


def l2_normalize(x, eps=1e-12):
    """Row-wise ``x / (||x|| + eps)`` over the last axis."""
    x = as_tensor(x)
    xd = x.data
    n = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    denom = n + eps
    out = xd / denom
    safe_n = np.where(n > 0, n, 1.0)

    def vjp(g):
        dot = (xd * g).sum(axis=-1, keepdims=True)
        return (g / denom - xd * dot / (safe_n * denom * denom),)

    return _make(out, (x,), vjp)


# ------------------------------------------------------- losses / attention


def kl_divergence(p_target, q, axis=-1, atol=1e-9):
    """``sum p log(p/q)`` over ``axis``; ``p_target`` must already be normalized.

    Entries with ``p == 0`` contribute zero.
    """
    p = _data(p_target)
    if np.any(p < 0) or not np.allclose(p.sum(axis=axis), 1.0, atol=atol):
        raise ContractError("KL target is not a probability distribution")
    q = as_tensor(q)
    logp = np.where(p > 0, np.log(np.where(p > 0, p, 1.0)), 0.0)
    return sum_(Tensor(p * logp) - Tensor(p) * log(q), axis=axis)


def kl_from_logits(target_logits, logits, temperature=1.0):
    """Per-row ``KL(softmax(t/T) || softmax(z/T))``; target logits are constants."""
    t = _data(target_logits) / temperature
    t = t - t.max(axis=-1, keepdims=True)
    log_pt = t - np.log(np.exp(t).sum(axis=-1, keepdims=True))
    pt = np.exp(log_pt)
    log_q = log_softmax(as_tensor(logits) * (1.0 / temperature), axis=-1)
    return sum_(Tensor(pt * log_pt) - Tensor(pt) * log_q, axis=-1)


def cross_entropy(logits, labels):
    labels = np.asarray(labels, dtype=np.intp)
    logp = log_softmax(logits, axis=-1)
    onehot = np.zeros(logp.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    return -(logp * onehot).sum() * (1.0 / len(labels))


def multi_head_attention(q, keys, values, heads, w_q=None, w_k=None, w_v=None, w_o=None):
    """Scaled dot-product attention split over ``heads``.

    ``q`` is ``(B, D)`` against shared ``(M, D)`` keys/values, or ``(B, Tq, D)``
    against per-sample ``(B, Tk, D)``. Projections left as ``None`` are identity.
    """
    q, keys, values = as_tensor(q), as_tensor(keys), as_tensor(values)
    d = q.shape[-1]
    if heads < 1 or d % heads:
        raise ConfigurationError(f"model width {d} is not divisible by {heads} heads")
    if keys.shape[-1] != d or values.shape[-1] != d or keys.shape[-2] != values.shape[-2]:
        raise DimensionError("query, key and value widths/lengths disagree")
    single = q.ndim == 2
    if single:
        q = reshape(q, (q.shape[0], 1, d))
    if w_q is not None:
        q = q @ w_q
    if w_k is not None:
        keys = keys @ w_k
    if w_v is not None:
        values = values @ w_v
    dh = d // heads

    def split(t):
        lead = t.shape[:-2]
        t = reshape(t, lead + (t.shape[-2], heads, dh))
        return swapaxes(t, -2, -3)

    qh, kh, vh = split(q), split(keys), split(values)
    scores = (qh @ swapaxes(kh, -1, -2)) * (1.0 / np.sqrt(dh))
    att = softmax(scores, axis=-1)
    ctx = swapaxes(att @ vh, -2, -3)
    out = reshape(ctx, ctx.shape[:-2] + (d,))
    if w_o is not None:
        out = out @ w_o
    if single:
        out = reshape(out, (out.shape[0], d))
    return out
