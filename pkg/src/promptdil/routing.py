"""Query enhancement, sparse prompt routing and prompt-pool management."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .entmax import entmax_tensor
from .exceptions import ContractError, DimensionError

COS_EPS = 1e-12


class PromptPool:
    """Key/value prompt rows with a frozen/active index partition.

    Rows live in two ``(N, d_a)`` tensors. The frozen rows are only ever read
    as constants, so they cannot receive gradients.
    """

    def __init__(self, keys, values, frozen=None, active=None):
        self.keys = Tensor(keys, requires_grad=True, name="pool.keys")
        self.values = Tensor(values, requires_grad=True, name="pool.values")
        n = self.keys.shape[0]
        if self.values.shape != self.keys.shape:
            raise DimensionError("prompt keys and values must have the same shape")
        self.frozen = np.asarray([] if frozen is None else frozen, dtype=np.intp)
        self.active = np.arange(n, dtype=np.intp) if active is None else np.asarray(active, dtype=np.intp)
        self._check_partition()

    @classmethod
    def initialize(cls, size, dim, rng):
        keys, values = new_prompt_rows(size, dim, rng)
        return cls(keys, values)

    def _check_partition(self):
        n = self.size
        both = np.concatenate([self.frozen, self.active])
        if len(np.intersect1d(self.frozen, self.active)) or not np.array_equal(np.sort(both), np.arange(n)):
            raise ContractError("frozen and active sets must partition the pool")

    @property
    def size(self):
        return self.keys.shape[0]

    @property
    def dim(self):
        return self.keys.shape[1]

    def row_mask(self):
        """Boolean mask of trainable rows."""
        mask = np.zeros(self.size, dtype=bool)
        mask[self.active] = True
        return mask

    def subset(self, which):
        """Key and value tensors for ``"frozen"``/``"active"``; frozen ones are constants."""
        if which == "frozen":
            return Tensor(self.keys.data[self.frozen]), Tensor(self.values.data[self.frozen])
        if which == "active":
            return ad.take_rows(self.keys, self.active), ad.take_rows(self.values, self.active)
        raise ValueError(which)

    def copy(self):
        return PromptPool(self.keys.data.copy(), self.values.data.copy(), self.frozen.copy(), self.active.copy())


def new_prompt_rows(count, dim, rng):
    keys = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(count, dim))
    values = rng.normal(0.0, 1e-4, size=(count, dim))
    return keys, values


def expand_pool(pool, count, rng):
    """Freeze the current active rows and append ``count`` fresh trainable rows."""
    if count < 1:
        raise ContractError("pool expansion needs at least one new prompt")
    keys, values = new_prompt_rows(count, pool.dim, rng)
    n = pool.size
    frozen = np.sort(np.concatenate([pool.frozen, pool.active]))
    active = np.arange(n, n + count, dtype=np.intp)
    return PromptPool(
        np.vstack([pool.keys.data, keys]),
        np.vstack([pool.values.data, values]),
        frozen=frozen,
        active=active,
    )


@dataclass
class MemoryBank:
    """Key/value memory slots, written by EMA and read as constants."""

    keys: np.ndarray
    values: np.ndarray
    momentum: float = 0.99

    @classmethod
    def initialize(cls, slots, dim, rng, momentum=0.99):
        keys = rng.normal(0.0, 1.0, size=(slots, dim))
        values = rng.normal(0.0, 1.0, size=(slots, dim))
        return cls(keys, values, momentum)

    @property
    def slots(self):
        return self.keys.shape[0]

    def copy(self):
        return MemoryBank(self.keys.copy(), self.values.copy(), self.momentum)


class QueryEnhancer:
    """Per-layer adapter weights: memory-read projections, query adapter, W_down, W_up."""

    PARAM_NAMES = ("w_q", "w_k", "w_v", "w_o", "w1", "ln_gain", "ln_bias", "w2", "w_down", "w_up")

    def __init__(self, **weights):
        missing = set(self.PARAM_NAMES) - set(weights)
        if missing:
            raise ContractError(f"missing enhancer weights: {sorted(missing)}")
        for name in self.PARAM_NAMES:
            setattr(self, name, Tensor(weights[name], requires_grad=True, name=name))

    @classmethod
    def initialize(cls, dim, bottleneck, rng):
        def normal(shape, fan_in, scale=1.0):
            return rng.normal(0.0, scale / np.sqrt(fan_in), size=shape)

        return cls(
            w_q=normal((dim, dim), dim),
            w_k=normal((dim, dim), dim),
            w_v=normal((dim, dim), dim),
            w_o=normal((dim, dim), dim),
            w1=normal((3 * dim, bottleneck), 3 * dim),
            ln_gain=np.ones(bottleneck),
            ln_bias=np.zeros(bottleneck),
            w2=normal((bottleneck, dim), bottleneck, 0.1),
            w_down=normal((dim, bottleneck), dim),
            w_up=normal((bottleneck, dim), bottleneck),
        )

    @classmethod
    def zeros(cls, dim, bottleneck):
        shapes = {
            "w_q": (dim, dim), "w_k": (dim, dim), "w_v": (dim, dim), "w_o": (dim, dim),
            "w1": (3 * dim, bottleneck), "ln_gain": (bottleneck,), "ln_bias": (bottleneck,),
            "w2": (bottleneck, dim), "w_down": (dim, bottleneck), "w_up": (bottleneck, dim),
        }
        return cls(**{k: np.zeros(s) for k, s in shapes.items()})

    def parameters(self):
        return [getattr(self, name) for name in self.PARAM_NAMES]

    def state(self):
        return {name: getattr(self, name).data.copy() for name in self.PARAM_NAMES}

    def copy(self):
        return QueryEnhancer(**self.state())


@dataclass
class RoutingOutput:
    """Per-layer routing result; ``weights_frozen`` is ``None`` when F is empty."""

    weights_frozen: Tensor | None
    weights_active: Tensor
    p_out: Tensor
    application_weights: Tensor = field(repr=False, default=None)


def read_memory(q, bank, enh, heads=4):
    """Attention readout of the memory bank for each query row."""
    return ad.multi_head_attention(
        q, Tensor(bank.keys), Tensor(bank.values), heads,
        w_q=enh.w_q, w_k=enh.w_k, w_v=enh.w_v, w_o=enh.w_o,
    )


def enhance_query(q, g, r, enh):
    """``q + W2 GELU(LN([q; g; r] W1))``."""
    c = ad.concat([q, g, r], axis=-1)
    h = ad.layer_norm(c @ enh.w1, enh.ln_gain, enh.ln_bias)
    return q + ad.gelu(h) @ enh.w2


def write_memory_ema(bank, queries, enhanced):
    """Gradient-free EMA write; returns a new bank.

    Each query row goes to its most cosine-similar key slot. An assigned slot
    moves its key towards the mean of its raw queries and its value towards the
    mean of the matching enhanced queries; other slots are untouched.
    """
    q = ad._data(queries)
    qe = ad._data(enhanced)
    kn = bank.keys / (np.linalg.norm(bank.keys, axis=1, keepdims=True) + COS_EPS)
    qn = q / (np.linalg.norm(q, axis=1, keepdims=True) + COS_EPS)
    slot = np.argmax(qn @ kn.T, axis=1)
    keys, values = bank.keys.copy(), bank.values.copy()
    gamma = bank.momentum
    for k in np.unique(slot):
        sel = slot == k
        keys[k] = gamma * keys[k] + (1.0 - gamma) * q[sel].mean(axis=0)
        values[k] = gamma * values[k] + (1.0 - gamma) * qe[sel].mean(axis=0)
    return MemoryBank(keys, values, gamma)


def cosine_logits(z, keys):
    return ad.l2_normalize(z, COS_EPS) @ ad.transpose(ad.l2_normalize(keys, COS_EPS))


def route_subset(q_tilde, keys, values, enh, alpha=1.5):
    """Entmax routing of ``q_tilde @ W_down`` over one key/value subset.

    Returns ``(weights, p)`` with weights ``(B, |subset|)`` and ``p = weights @ values``.
    """
    if keys.shape[0] == 0:
        raise ContractError("cannot route over an empty prompt subset")
    z = q_tilde @ enh.w_down
    weights = entmax_tensor(cosine_logits(z, keys), alpha)
    return weights, weights @ values


def combine_residual(p_frozen, p_active, lambda_r=0.1):
    return p_frozen + p_active * lambda_r


def route(q_tilde, pool, enh, alpha=1.5, lambda_r=0.1):
    """Full routing step for one layer.

    With an empty frozen set the whole pool is routed once and ``p_out`` is its
    prompt; otherwise the two subsets are routed independently and combined.
    """
    ak, av = pool.subset("active")
    w_a, p_a = route_subset(q_tilde, ak, av, enh, alpha)
    if len(pool.frozen) == 0:
        return RoutingOutput(None, w_a, p_a, w_a)
    fk, fv = pool.subset("frozen")
    w_f, p_f = route_subset(q_tilde, fk, fv, enh, alpha)
    return RoutingOutput(w_f, w_a, combine_residual(p_f, p_a, lambda_r), w_a)


def full_pool_usage(out, pool):
    """Per-sample weights scattered to full pool width (B, N) as a plain array.

    With a partition each subset carries half of the mass.
    """
    w_a = ad._data(out.weights_active)
    full = np.zeros((w_a.shape[0], pool.size))
    if out.weights_frozen is None:
        full[:, pool.active] = w_a
    else:
        full[:, pool.active] = 0.5 * w_a
        full[:, pool.frozen] = 0.5 * ad._data(out.weights_frozen)
    return full


def cls_update(q, p_out, enh):
    """New CLS state ``q + p_out @ W_up`` for a ``(B, D)`` CLS batch."""
    return q + p_out @ enh.w_up


def inject_cls(tokens, p_out, enh):
    """Replace the CLS row (index 0) of ``(B, 1+S, D)`` tokens with ``cls + p_out @ W_up``."""
    tokens = ad.as_tensor(tokens)
    if tokens.ndim != 3:
        raise DimensionError(f"expected (B, 1+S, D) tokens, got shape {tokens.shape}")
    b, _, d = tokens.shape
    cls = cls_update(tokens[:, 0, :], p_out, enh)
    return ad.concat([ad.reshape(cls, (b, 1, d)), tokens[:, 1:, :]], axis=1)


def diversity_loss(weights, values):
    """Usage-weighted mean absolute cosine between distinct prompt values.

    Returns a zero constant when fewer than two prompts are given or the
    off-diagonal usage mass vanishes.
    """
    weights = ad.as_tensor(weights)
    values = ad.as_tensor(values)
    n = values.shape[0]
    if n < 2:
        return Tensor(0.0)
    u = ad.mean(weights, axis=0)
    off = 1.0 - np.eye(n)
    uu = ad.reshape(u, (n, 1)) * ad.reshape(u, (1, n)) * off
    denom = ad.sum_(uu)
    if denom.data <= 0:
        return Tensor(0.0)
    vn = ad.l2_normalize(values, COS_EPS)
    cos = ad.abs_(vn @ ad.transpose(vn))
    return ad.sum_(uu * cos) / denom


def norm_loss(values):
    """Mean L2 norm of the given value rows."""
    values = ad.as_tensor(values)
    sq = ad.sum_(values * values, axis=-1)
    nonzero = sq.data > 0
    # zero rows contribute exactly 0 with a zero subgradient
    safe = Tensor(np.where(nonzero, 0.0, 1.0))
    return ad.mean(ad.sqrt(sq + safe) * Tensor(nonzero.astype(np.float64)))
