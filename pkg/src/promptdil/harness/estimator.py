"""Scikit-learn style domain-incremental learner.

Each call to :meth:`PromptDILClassifier.partial_fit` trains one stage of the
stream. Stage 1 trains the whole prompt pool with cross-entropy plus the
diversity loss. Later stages first measure prompt-usage drift on the new
data, expand the pool when the drift is large enough, and then train with
distillation, pseudo replay and uncertainty weighting.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .. import autodiff as ad
from ..drift import DriftMonitor, expansion_size, selection_entropy, should_expand, usage_set
from ..drift import measure_drift as _measure_drift
from ..exceptions import ConfigurationError, StateError
from ..optim import AdamW
from ..preservation import (
    ClassifierHead,
    ClassStats,
    merge_stats,
    pseudo_kd_loss,
    real_kd_loss,
    sample_pseudo,
    snapshot_teacher,
)
from ..routing import MemoryBank, PromptPool, QueryEnhancer, diversity_loss, expand_pool, norm_loss, write_memory_ema
from ..validation import check_labels, check_tokens
from ..weighting import LOSS_NAMES, UncertaintyWeights, check_finite, total_loss
from .backbone import BackboneStub
from .config import COMPONENTS
from .model import PromptedNetwork, batches
from .rng import rng_for


class PromptDILClassifier(ClassifierMixin, BaseEstimator):
    """Rehearsal-free domain-incremental classifier with sparse residual prompt routing.

    Parameters mirror :class:`~promptdil.harness.config.ExperimentConfig`.
    ``drop`` lists components to ablate (see ``COMPONENTS``).

    Attributes
    ----------
    classes_ : ndarray
    n_stages_ : int
        Number of stages trained so far.
    network_ : PromptedNetwork
    head_ : ClassifierHead
        Student head used for prediction.
    teacher_ : ClassifierHead or None
        Frozen copy of the head at the end of the last stage.
    stats_ : ClassStats
        Cumulative per-class feature statistics.
    uw_ : UncertaintyWeights or None
    monitors_ : list of DriftMonitor
        One per prompted layer.
    drift_reports_ : dict
        Stage number to :class:`~promptdil.drift.DriftReport`.
    history_ : list of dict
        One record per (stage, epoch).
    events_ : list of tuple
        Protocol event log ``(stage, event)``.
    """

    def __init__(self, *, feature_dim=64, bottleneck=32, pool_size=60, memory_slots=9, n_layers=4,
                 n_heads=4, memory_heads=4, inject_layers=None, n_tokens=None, alpha=1.5, lambda_r=0.1,
                 tau_s=0.01, window=100, drift_alpha=1.0, drift_beta=0.5, eta=0.1, d_max=5.0, e_min=10,
                 e_max=80, theta=0.7, temperature=2.0, pseudo_count=None, memory_momentum=0.99,
                 reset_uw=False, batch_size=64, epochs=10, patience=5, lr=1e-3, weight_decay=0.01,
                 drop=(), random_state=0):
        self.feature_dim = feature_dim
        self.bottleneck = bottleneck
        self.pool_size = pool_size
        self.memory_slots = memory_slots
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.memory_heads = memory_heads
        self.inject_layers = inject_layers
        self.n_tokens = n_tokens
        self.alpha = alpha
        self.lambda_r = lambda_r
        self.tau_s = tau_s
        self.window = window
        self.drift_alpha = drift_alpha
        self.drift_beta = drift_beta
        self.eta = eta
        self.d_max = d_max
        self.e_min = e_min
        self.e_max = e_max
        self.theta = theta
        self.temperature = temperature
        self.pseudo_count = pseudo_count
        self.memory_momentum = memory_momentum
        self.reset_uw = reset_uw
        self.batch_size = batch_size
        self.epochs = epochs
        self.patience = patience
        self.lr = lr
        self.weight_decay = weight_decay
        self.drop = drop
        self.random_state = random_state

    # ------------------------------------------------------------ set-up

    def _enabled(self, component):
        return component not in self.drop

    def _rng(self, label):
        return rng_for(self.random_state, label)

    def _initialize(self, X, classes):
        unknown = set(self.drop) - set(COMPONENTS)
        if unknown:
            raise ConfigurationError(f"unknown ablation component(s): {sorted(unknown)}")
        self.classes_ = np.unique(np.asarray(classes))
        n_classes = len(self.classes_)
        self.n_tokens_in_, self.input_dim_ = X.shape[1], X.shape[2]
        layers = list(range(self.n_layers)) if self.inject_layers is None else [int(i) for i in self.inject_layers]
        if any(not 0 <= i < self.n_layers for i in layers):
            raise ConfigurationError(f"inject_layers {layers} outside [0, {self.n_layers})")
        backbone = BackboneStub(self.input_dim_, self.feature_dim, self.n_tokens_in_, self.n_layers,
                                self.n_heads, self._rng("backbone"))
        pool = PromptPool.initialize(self.pool_size, self.bottleneck, self._rng("pool"))
        bank = MemoryBank.initialize(self.memory_slots, self.feature_dim, self._rng("memory"), self.memory_momentum)
        enhancers = {
            layer: QueryEnhancer.initialize(self.feature_dim, self.bottleneck, self._rng(f"enhancer.{layer}"))
            for layer in layers
        }
        self.network_ = PromptedNetwork(backbone, pool, bank, enhancers, layers, self.alpha, self.lambda_r,
                                        self.memory_heads, self._enabled("query-enhancer"))
        self.head_ = ClassifierHead.initialize(n_classes, self.feature_dim, self._rng("head"))
        self.teacher_ = None
        self.stats_ = ClassStats(n_classes, self.feature_dim)
        self.uw_ = None
        self.monitors_ = [self._new_monitor() for _ in layers]
        self.n_stages_ = 0
        self.drift_reports_ = {}
        self.expansions_ = {}
        self.history_ = []
        self.events_ = []
        self.stage_snapshots_ = []
        self._pseudo_rng = self._rng("pseudo")
        self._shuffle_rng = self._rng("shuffle")
        self._expand_rng = self._rng("expand")
        self._monitor_rng = self._rng("monitor")

    def _new_monitor(self):
        return DriftMonitor(self.window, self.tau_s, self.drift_alpha, self.drift_beta, self.eta)

    # ------------------------------------------------------- public API

    def fit(self, X, y, X_val=None, y_val=None):
        """Train a fresh model on a single stage."""
        for attr in ("network_", "classes_"):
            if hasattr(self, attr):
                delattr(self, attr)
        return self.partial_fit(X, y, classes=np.unique(y), X_val=X_val, y_val=y_val)

    def partial_fit(self, X, y, classes=None, X_val=None, y_val=None):
        """Train the next stage on ``(X, y)``; ``classes`` is required on the first call."""
        X = check_tokens(X, self.n_tokens, getattr(self, "input_dim_", None))
        if not hasattr(self, "network_"):
            if classes is None:
                raise ValueError("classes must be given on the first partial_fit call")
            self._initialize(X, classes)
        y = check_labels(y, self.classes_)
        if len(y) != len(X):
            raise ValueError("X and y have different lengths")
        if X_val is not None:
            X_val = check_tokens(X_val, self.n_tokens, self.input_dim_)
            y_val = check_labels(y_val, self.classes_)
        self._run_stage(X, y, X_val, y_val)
        return self

    def transform(self, X):
        """Final-layer CLS features."""
        check_is_fitted(self, "network_")
        X = check_tokens(X, self.n_tokens, self.input_dim_)
        return self._features(X)

    def decision_function(self, X):
        return self._logits(self.transform(X), self.head_)

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        check_is_fitted(self, "network_")
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def routing_weights(self, X):
        """Per-layer ``(n_samples, N)`` routing weights over the full pool."""
        check_is_fitted(self, "network_")
        X = check_tokens(X, self.n_tokens, self.input_dim_)
        out = [[] for _ in self.network_.inject_layers]
        for idx in batches(len(X), self.batch_size):
            for i, w in enumerate(self.network_.usage(self.network_.forward(X[idx]))):
                out[i].append(w)
        return [np.vstack(w) for w in out]

    def measure_drift(self, X):
        """Stream ``X`` through the frozen model, updating the drift monitors in place."""
        check_is_fitted(self, "network_")
        X = check_tokens(X, self.n_tokens, self.input_dim_)
        return self._measure_drift_hidden(self._patch_hidden(X), len(X))

    # ---------------------------------------------------------- internals

    def _features(self, X, network=None):
        net = network or self.network_
        return np.vstack([net.forward(X[idx]).features.data for idx in batches(len(X), 256)])

    def _patch_hidden(self, X):
        """Frozen patch states for all of ``X`` (they never depend on trainable state)."""
        parts = [self.network_.backbone.patch_hidden(X[idx]) for idx in batches(len(X), 256)]
        return [np.concatenate(layer) for layer in zip(*parts)]

    def _forward_rows(self, hidden, idx):
        net = self.network_
        return net.forward_cached(net.backbone.patch_kv([h[idx] for h in hidden]))

    def _features_hidden(self, hidden, n):
        return np.vstack([self._forward_rows(hidden, idx).features.data for idx in batches(n, 256)])

    def _measure_drift_hidden(self, hidden, n):
        net = self.network_

        def weight_batches():
            for idx in batches(n, self.batch_size):
                yield net.usage(self._forward_rows(hidden, idx))

        return _measure_drift(self.monitors_, weight_batches())

    def _refresh_monitors(self, hidden, n):
        """Refill every drift window with frozen-model batches of the finished stage.

        Entries pushed during training track a moving model; replacing them
        with passes of the final model makes the window a reference for the
        stage's own data rather than for the optimization trajectory.
        """
        net = self.network_
        # the model is frozen and routing is per sample, so weights are computed once
        chunks = [net.usage(self._forward_rows(hidden, idx)) for idx in batches(n, 256)]
        per_layer = [np.concatenate(layer) for layer in zip(*chunks)]
        pushed = 0
        while pushed < self.window:
            for idx in batches(n, self.batch_size, self._monitor_rng.permutation(n)):
                for monitor, w in zip(self.monitors_, per_layer):
                    w_bar = w[idx].mean(axis=0)
                    monitor.push(selection_entropy(w_bar), usage_set(w_bar, self.tau_s))
                pushed += 1
                if pushed >= self.window:
                    break

    def _accuracy_hidden(self, hidden, y):
        feats = self._features_hidden(hidden, len(y))
        return float(np.mean(np.argmax(self._logits(feats, self.head_), axis=1) == y))

    @staticmethod
    def _logits(features, head):
        return features @ head.weight.data.T + head.bias.data

    def _run_stage(self, X, y, X_val, y_val):
        stage = self.n_stages_ + 1
        hidden = self._patch_hidden(X)
        if stage >= 2:
            if self.teacher_ is None:
                raise StateError(f"stage {stage} needs the teacher head saved after stage {stage - 1}")
            if self._enabled("pudd"):
                report = self._measure_drift_hidden(hidden, len(X))
                self.drift_reports_[stage] = report
                self.events_.append((stage, "drift"))
                if should_expand(report.mean_drift, self.theta):
                    count = expansion_size(len(self.network_.pool.active), report.mean_drift,
                                           self.d_max, self.e_min, self.e_max)
                    self.network_.pool = expand_pool(self.network_.pool, count, self._expand_rng)
                    self.expansions_[stage] = count
                    self.events_.append((stage, "expand"))
            if self.uw_ is None or self.reset_uw:
                self.uw_ = UncertaintyWeights()
        self.events_.append((stage, "train_start"))
        self._train(stage, hidden, y, X_val, y_val)
        self.events_.append((stage, "train_end"))
        self._refresh_monitors(hidden, len(y))
        self.events_.append((stage, "monitor_refresh"))
        self.teacher_ = snapshot_teacher(self.head_)
        self.events_.append((stage, "teacher_snapshot"))
        stage_stats = ClassStats(len(self.classes_), self.feature_dim).update_many(self._features_hidden(hidden, len(y)), y)
        self.stats_ = merge_stats(self.stats_, stage_stats)
        self.events_.append((stage, "stats_merge"))
        self.stage_snapshots_.append({"network": self.network_.snapshot(), "head": self.head_.copy()})
        self.n_stages_ = stage

    def _trainable_state(self):
        return {
            "net": self.network_.snapshot(),
            "head": self.head_.copy(),
            "uw": None if self.uw_ is None else self.uw_.copy(),
        }

    def _restore(self, state):
        # Copy values into the live tensors so the optimizer keeps its references.
        net = self.network_
        net.pool.keys.data = state["net"]["pool"].keys.data.copy()
        net.pool.values.data = state["net"]["pool"].values.data.copy()
        net.bank = state["net"]["bank"].copy()
        for layer, enh in net.enhancers.items():
            for name, value in state["net"]["enhancers"][layer].state().items():
                getattr(enh, name).data = value
        self.head_.weight.data = state["head"].weight.data.copy()
        self.head_.bias.data = state["head"].bias.data.copy()
        if state["uw"] is not None:
            for name, s in state["uw"].log_vars.items():
                self.uw_.log_vars[name].data = s.data.copy()

    def _stage_losses(self, stage, fwd, yb):
        net = self.network_
        logits = self.head_(fwd.features)
        losses = {"ce": ad.cross_entropy(logits, yb)}
        if self._enabled("div"):
            values = ad.take_rows(net.pool.values, net.pool.active)
            per_layer = [diversity_loss(r.application_weights, values) for r in fwd.routes]
            losses["div"] = ad.mean(ad.concat([ad.reshape(d, (1,)) for d in per_layer], axis=0))
        if stage >= 2:
            if self._enabled("distill"):
                losses["real"] = real_kd_loss(fwd.features, self.teacher_, self.head_, self.temperature)
            if self._enabled("pseudo") and len(self.stats_.eligible()):
                k = self.pseudo_count or len(yb)
                f_tilde, _ = sample_pseudo(self.stats_, k, self._pseudo_rng)
                losses["pseudo"] = pseudo_kd_loss(f_tilde, self.teacher_, self.head_, self.temperature)
            if self._enabled("norm") and len(net.pool.frozen):
                losses["norm"] = norm_loss(ad.take_rows(net.pool.values, net.pool.active))
        return fwd, losses

    def _combine(self, stage, losses):
        if stage >= 2 and self._enabled("uw"):
            return total_loss(losses, self.uw_)
        check_finite(losses)
        total = ad.Tensor(0.0)
        for value in losses.values():
            total = total + value
        return total

    def _train(self, stage, hidden, y, X_val, y_val):
        net = self.network_
        params = net.parameters() + self.head_.parameters()
        use_uw = stage >= 2 and self._enabled("uw")
        if use_uw:
            params += self.uw_.parameters()
        n_batches = int(np.ceil(len(y) / self.batch_size))
        opt = AdamW(
            params, lr=self.lr, weight_decay=self.weight_decay,
            no_decay=self.uw_.parameters() if use_uw else (),
            row_masks={net.pool.keys: net.pool.row_mask(), net.pool.values: net.pool.row_mask()},
            total_steps=self.epochs * n_batches,
        )
        if X_val is not None:
            hidden_val, y_eval = self._patch_hidden(X_val), y_val
        else:
            hidden_val, y_eval = hidden, y
        best_acc, best_state, stale = -np.inf, None, 0
        for epoch in range(1, self.epochs + 1):
            order = self._shuffle_rng.permutation(len(y))
            sums = {}
            epoch_lr = opt.lr
            for idx in batches(len(y), self.batch_size, order):
                with ad.Tape() as tape:
                    fwd, losses = self._stage_losses(stage, self._forward_rows(hidden, idx), y[idx])
                    loss = self._combine(stage, losses)
                grads = tape.backward(loss)
                opt.step(grads)
                if use_uw:
                    self.uw_.clamp()
                if net.use_query_enhancer:
                    net.bank = write_memory_ema(net.bank, np.vstack(fwd.queries), np.vstack(fwd.enhanced))
                for monitor, w in zip(self.monitors_, net.usage(fwd)):
                    w_bar = w.mean(axis=0)
                    monitor.push(selection_entropy(w_bar), usage_set(w_bar, self.tau_s))
                for name, value in losses.items():
                    sums[name] = sums.get(name, 0.0) + float(value.data)
            acc = self._accuracy_hidden(hidden_val, y_eval)
            record = {"stage": stage, "epoch": epoch, "lr": epoch_lr, "val_acc": acc,
                      "pool_size": net.pool.size, "active": len(net.pool.active)}
            for name in LOSS_NAMES:
                record[f"loss_{name}"] = sums[name] / n_batches if name in sums else None
                if use_uw:
                    record[f"s_{name}"] = float(self.uw_.log_vars[name].data)
                    record[f"w_{name}"] = self.uw_.weights()[name]
                else:
                    record[f"s_{name}"] = None
                    record[f"w_{name}"] = 1.0 if name in sums else None
            self.history_.append(record)
            if acc > best_acc:
                best_acc, best_state, stale = acc, self._trainable_state(), 0
            else:
                stale += 1
                if stale >= self.patience:
                    break
        if best_state is not None:
            self._restore(best_state)
