"""A small frozen pre-LN transformer standing in for a pretrained backbone.

Patch tokens attend only to patch tokens while the CLS token attends to
everything. Prompts are injected into CLS alone, so the patch stream never
depends on trainable state: it is evaluated once per input as plain arrays,
and only the CLS path is differentiated.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtr

from .. import autodiff as ad
from ..autodiff import Tensor


def _layer_norm(x, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    c = x - mu
    return c / np.sqrt((c * c).mean(axis=-1, keepdims=True) + eps)


def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class BackboneStub:
    """Token embedding, CLS token and ``n_layers`` attention + MLP blocks, all frozen."""

    def __init__(self, input_dim, dim, n_tokens, n_layers, heads, rng):
        self.input_dim, self.dim, self.n_tokens = input_dim, dim, n_tokens
        self.n_layers, self.heads = n_layers, heads
        self.embed = rng.normal(0.0, 1.0 / np.sqrt(input_dim), size=(input_dim, dim))
        self.cls = rng.normal(0.0, 1.0, size=(dim,))
        self.pos = rng.normal(0.0, 0.1, size=(n_tokens + 1, dim))
        self.blocks = []
        for _ in range(n_layers):
            self.blocks.append({
                "w_q": rng.normal(0.0, 1.0 / np.sqrt(dim), size=(dim, dim)),
                "w_k": rng.normal(0.0, 1.0 / np.sqrt(dim), size=(dim, dim)),
                "w_v": rng.normal(0.0, 1.0 / np.sqrt(dim), size=(dim, dim)),
                "w_o": rng.normal(0.0, 0.5 / np.sqrt(dim), size=(dim, dim)),
                "w_in": rng.normal(0.0, 1.0 / np.sqrt(dim), size=(dim, 2 * dim)),
                "w_out": rng.normal(0.0, 0.5 / np.sqrt(2 * dim), size=(2 * dim, dim)),
            })

    def _split(self, x):
        lead = x.shape[:-1]
        dh = self.dim // self.heads
        return np.swapaxes(x.reshape(lead + (self.heads, dh)), -2, -3)

    def embed_cls(self, n):
        return np.broadcast_to(self.cls + self.pos[0], (n, self.dim)).copy()

    def patch_hidden(self, x):
        """Per-layer normalized patch states ``(B, S, D)`` feeding each attention block."""
        x = np.asarray(x, dtype=np.float64)
        tokens = x @ self.embed + self.pos[1:]
        out = []
        dh = self.dim // self.heads
        for p in self.blocks:
            h = _layer_norm(tokens)
            out.append(h)
            q, k, v = (self._split(h @ p[name]) for name in ("w_q", "w_k", "w_v"))
            att = _softmax(q @ np.swapaxes(k, -1, -2) / np.sqrt(dh))
            ctx = np.swapaxes(att @ v, -2, -3).reshape(tokens.shape)
            tokens = tokens + ctx @ p["w_o"]
            h = _layer_norm(tokens)
            pre = h @ p["w_in"]
            tokens = tokens + (pre * ndtr(pre)) @ p["w_out"]
        return out

    def patch_kv(self, hidden):
        """Per-layer ``(keys, values)``, each ``(B, heads, S, dh)``, from :meth:`patch_hidden`."""
        return [(self._split(h @ p["w_k"]), self._split(h @ p["w_v"]))
                for h, p in zip(hidden, self.blocks)]

    def patch_stream(self, x):
        return self.patch_kv(self.patch_hidden(x))

    def cls_block(self, index, cls, patch_kv):
        """Advance the ``(B, D)`` CLS tensor through block ``index``."""
        p = self.blocks[index]
        k_patch, v_patch = patch_kv
        b = cls.shape[0]
        dh = self.dim // self.heads
        h = ad.layer_norm(cls)

        def heads_of(t):
            return ad.reshape(t, (b, self.heads, 1, dh))

        q = heads_of(h @ p["w_q"])
        k = ad.concat([heads_of(h @ p["w_k"]), ad.Tensor(k_patch)], axis=2)
        v = ad.concat([heads_of(h @ p["w_v"]), ad.Tensor(v_patch)], axis=2)
        att = ad.softmax((q @ ad.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh)), axis=-1)
        ctx = ad.reshape(att @ v, (b, self.dim))
        cls = cls + ctx @ p["w_o"]
        h = ad.layer_norm(cls)
        return cls + ad.gelu(h @ p["w_in"]) @ p["w_out"]

    def forward(self, x):
        """Prompt-free final CLS features."""
        x = np.asarray(x, dtype=np.float64)
        cls = Tensor(self.embed_cls(len(x)))
        for i, kv in enumerate(self.patch_stream(x)):
            cls = self.cls_block(i, cls, kv)
        return self.final(cls)

    def final(self, cls):
        """Parameter-free output normalization of the CLS state."""
        return ad.layer_norm(cls)

    def state(self):
        out = {"embed": self.embed, "cls": self.cls, "pos": self.pos}
        for i, b in enumerate(self.blocks):
            for k, v in b.items():
                out[f"block{i}.{k}"] = v
        return out

    def load_state(self, state):
        self.embed = np.array(state["embed"])
        self.cls = np.array(state["cls"])
        self.pos = np.array(state["pos"])
        for i, b in enumerate(self.blocks):
            for k in b:
                b[k] = np.array(state[f"block{i}.{k}"])
