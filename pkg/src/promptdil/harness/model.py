"""Forward pass of the prompted backbone: enhancement, routing and CLS injection per layer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..routing import (
    MemoryBank,
    PromptPool,
    QueryEnhancer,
    enhance_query,
    full_pool_usage,
    cls_update,
    read_memory,
    route,
)


@dataclass
class ForwardPass:
    features: ad.Tensor
    routes: list
    queries: list
    enhanced: list


class PromptedNetwork:
    """Frozen backbone plus the trainable prompt machinery (no classifier head)."""

    def __init__(self, backbone, pool, bank, enhancers, inject_layers, alpha=1.5, lambda_r=0.1,
                 memory_heads=4, use_query_enhancer=True):
        self.backbone = backbone
        self.pool: PromptPool = pool
        self.bank: MemoryBank = bank
        self.enhancers: dict = enhancers
        self.inject_layers = list(inject_layers)
        self.alpha = alpha
        self.lambda_r = lambda_r
        self.memory_heads = memory_heads
        self.use_query_enhancer = use_query_enhancer

    def parameters(self):
        params = [self.pool.keys, self.pool.values]
        for layer in self.inject_layers:
            enh = self.enhancers[layer]
            if self.use_query_enhancer:
                params.extend(enh.parameters())
            else:
                params.extend([enh.w_down, enh.w_up])
        return params

    def forward(self, x):
        return self.forward_cached(self.backbone.patch_stream(x))

    def forward_cached(self, patch_kv):
        """Forward from a precomputed :meth:`BackboneStub.patch_stream`."""
        cls = ad.Tensor(self.backbone.embed_cls(patch_kv[0][0].shape[0]))
        g = cls
        routes, queries, enhanced = [], [], []
        for layer in range(self.backbone.n_layers):
            if layer in self.enhancers:
                enh: QueryEnhancer = self.enhancers[layer]
                q = cls
                if self.use_query_enhancer:
                    r = read_memory(q, self.bank, enh, self.memory_heads)
                    q_tilde = enhance_query(q, g, r, enh)
                else:
                    q_tilde = q
                out = route(q_tilde, self.pool, enh, self.alpha, self.lambda_r)
                cls = cls_update(q, out.p_out, enh)
                routes.append(out)
                queries.append(q.data)
                enhanced.append(q_tilde.data)
            cls = self.backbone.cls_block(layer, cls, patch_kv[layer])
        return ForwardPass(self.backbone.final(cls), routes, queries, enhanced)

    def usage(self, fwd):
        """Per-layer ``(B, N)`` routing weights over the full pool."""
        return [full_pool_usage(r, self.pool) for r in fwd.routes]

    def snapshot(self):
        """Value copy of the trainable prompt state (pool, bank, enhancers)."""
        return {
            "pool": self.pool.copy(),
            "bank": self.bank.copy(),
            "enhancers": {k: v.copy() for k, v in self.enhancers.items()},
        }

    def load_snapshot(self, snap):
        self.pool = snap["pool"].copy()
        self.bank = snap["bank"].copy()
        self.enhancers = {k: v.copy() for k, v in snap["enhancers"].items()}

    def with_snapshot(self, snap):
        other = PromptedNetwork(self.backbone, self.pool, self.bank, self.enhancers, self.inject_layers,
                                self.alpha, self.lambda_r, self.memory_heads, self.use_query_enhancer)
        other.load_snapshot(snap)
        return other


def batches(n, batch_size, order=None):
    order = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]
