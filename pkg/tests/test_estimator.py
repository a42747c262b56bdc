import numpy as np
import pytest
from e2e import end_to_end_gradient_error, freeze_probe, stage_loss, tiny, train_stages
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from promptdil import autodiff as ad
from promptdil.exceptions import ConfigurationError, StateError
from promptdil.harness.backbone import BackboneStub
from promptdil.harness.estimator import PromptDILClassifier
from promptdil.harness.model import PromptedNetwork
from promptdil.routing import MemoryBank, PromptPool, QueryEnhancer
from promptdil.validation import check_tokens

PROTOCOL = ["train_start", "train_end", "monitor_refresh", "teacher_snapshot", "stats_merge"]


@pytest.fixture(scope="module")
def two_stage():
    return train_stages(tiny(severity=[0.0, 0.9]))


def test_sklearn_surface(two_stage):
    est, stream = two_stage
    X = stream.stages[1].test.X
    assert clone(est).get_params() == est.get_params()
    proba = est.predict_proba(X)
    assert proba.shape == (len(X), 3)
    assert np.allclose(proba.sum(axis=1), 1.0)
    assert np.array_equal(est.classes_[proba.argmax(axis=1)], est.predict(X))
    assert est.transform(X).shape == (len(X), 8)
    assert 0.0 <= est.score(X, stream.stages[1].test.y) <= 1.0
    assert [w.shape for w in est.routing_weights(X)] == [(len(X), est.network_.pool.size)] * 2


def test_two_dimensional_input_is_split(two_stage):
    est, stream = two_stage
    X = stream.stages[0].test.X
    flat = X.reshape(len(X), -1)
    e = clone(est).set_params(n_tokens=X.shape[1])
    e.fit(flat[:40], stream.stages[0].test.y[:40])
    assert e.predict(flat).shape == (len(X),)


def test_not_fitted_and_bad_input(tiny_config):
    est = PromptDILClassifier(**tiny_config.estimator_params())
    with pytest.raises(NotFittedError):
        est.predict(np.zeros((2, 4, 4)))
    with pytest.raises(ValueError):
        est.partial_fit(np.zeros((2, 4, 4)), [0, 1])
    with pytest.raises(ValueError):
        est.partial_fit(np.full((2, 4, 4), np.nan), [0, 1], classes=[0, 1])
    with pytest.raises(ConfigurationError):
        PromptDILClassifier(drop=("bogus",)).fit(np.zeros((4, 2, 4)), [0, 1, 0, 1])


def test_event_ordering(two_stage):
    est, _ = two_stage
    events = est.events_
    assert [e for s, e in events if s == 1] == PROTOCOL
    stage2 = [e for s, e in events if s == 2]
    assert stage2[0] == "drift"
    assert stage2[-len(PROTOCOL):] == PROTOCOL
    # teacher and stats of stage 1 exist strictly between its training and the next one
    i_snap = events.index((1, "teacher_snapshot"))
    assert events.index((1, "train_end")) < i_snap < events.index((2, "train_start"))
    assert events.index((1, "stats_merge")) < events.index((2, "train_start"))


def test_missing_teacher(two_stage):
    est, stream = two_stage
    est = PromptDILClassifier(**tiny().estimator_params())
    s = stream.stages[0]
    est.partial_fit(s.train.X, s.train.y, classes=[0, 1, 2])
    est.teacher_ = None
    with pytest.raises(StateError):
        est.partial_fit(s.train.X, s.train.y)


def test_history_records(two_stage):
    est, _ = two_stage
    assert [(r["stage"], r["epoch"]) for r in est.history_] == [(1, 1), (2, 1)]
    first, second = est.history_
    assert first["loss_real"] is None and first["s_ce"] is None
    assert second["loss_real"] is not None and second["w_ce"] == np.exp(-second["s_ce"])


def test_freezing_invariants():
    cfg = tiny(stages=3, severity=[0.0, 0.9, 0.9], epochs=2)
    from promptdil.harness.stream import generate_stream

    stream = generate_stream(cfg)
    est = PromptDILClassifier(**cfg.estimator_params())
    records = freeze_probe(est)
    for k, s in enumerate(stream.stages):
        est.partial_fit(s.train.X, s.train.y, classes=[0, 1, 2] if k == 0 else None)
    assert len(records) == 3
    for before, after, n_frozen in records[1:]:
        assert n_frozen > 0
        assert before == after
    assert records[0][0]["backbone"] == records[-1][1]["backbone"]


def test_stage_one_prompt_rows_survive(two_stage):
    est, _ = two_stage
    first = est.stage_snapshots_[0]["network"]["pool"]
    final = est.network_.pool
    assert np.array_equal(final.keys.data[: first.size], first.keys.data)
    assert np.array_equal(final.values.data[: first.size], first.values.data)


def test_zero_adapter_network_is_backbone(rng):
    backbone = BackboneStub(4, 8, 5, 3, 2, rng)
    enhancers = {layer: QueryEnhancer.zeros(8, 4) for layer in range(3)}
    net = PromptedNetwork(backbone, PromptPool.initialize(6, 4, rng), MemoryBank.initialize(3, 8, rng), enhancers,
                          range(3), memory_heads=2)
    X = rng.normal(size=(7, 5, 4))
    assert np.array_equal(net.forward(X).features.data, backbone.forward(X).data)


def test_drop_div_matches_zeroed_div(two_stage):
    est, stream = two_stage
    X = check_tokens(stream.stages[1].train.X)
    y = stream.stages[1].train.y
    hidden = est._patch_hidden(X)
    idx = np.arange(16)
    values = est.network_.pool.values

    def grad(drop, scale_div):
        est.drop = drop
        original = est._stage_losses

        def scaled(stage, fwd, yb):
            fwd, losses = original(stage, fwd, yb)
            if "div" in losses:
                losses["div"] = losses["div"] * scale_div
            return fwd, losses

        est._stage_losses = scaled
        try:
            with ad.Tape() as tape:
                loss = stage_loss(est, hidden, idx, y, 2)
            return tape.gradient(loss, [values])[0]
        finally:
            del est._stage_losses
            est.drop = ()

    dropped = grad(("div",), 1.0)
    zeroed = grad((), 0.0)
    assert np.array_equal(dropped, zeroed)
    assert not np.array_equal(grad((), 1.0), zeroed)


@pytest.mark.parametrize("stages", [1, 2])
def test_end_to_end_gradients(stages):
    est, stream = train_stages(tiny(severity=[0.0, 0.9]), stages=stages)
    s = stream.stages[stages - 1].train
    X = check_tokens(s.X)
    worst = max(end_to_end_gradient_error(est, X, s.y, seed, coords=6) for seed in range(25))
    assert worst < 1e-3


def test_drop_uw_and_pudd():
    est, _ = train_stages(tiny(drop=["uw", "pudd"], severity=[0.0, 0.9]))
    assert "drift" not in [e for _, e in est.events_]
    assert est.history_[-1]["s_ce"] is None
    assert est.network_.pool.size == 8


def test_drop_query_enhancer_freezes_adapters():
    cfg = tiny(drop=["query-enhancer"])
    est, stream = train_stages(cfg)
    init = PromptDILClassifier(**cfg.estimator_params())
    init._initialize(check_tokens(stream.stages[0].train.X[:1]), [0, 1, 2])
    for layer, enh in est.network_.enhancers.items():
        fresh = init.network_.enhancers[layer]
        assert np.array_equal(enh.w1.data, fresh.w1.data) and np.array_equal(enh.w_q.data, fresh.w_q.data)
        assert not np.array_equal(enh.w_down.data, fresh.w_down.data)
    assert est.network_.bank.keys.tobytes() == init.network_.bank.keys.tobytes()


def test_determinism():
    a, _ = train_stages(tiny())
    b, _ = train_stages(tiny())
    assert a.history_ == b.history_
    assert a.network_.pool.values.data.tobytes() == b.network_.pool.values.data.tobytes()


def _expanded_on_second_stage(severity, seed):
    from pathlib import Path

    from promptdil.harness.config import load_config
    from promptdil.harness.stream import generate_stream

    cfg = load_config(Path(__file__).resolve().parents[1] / "configs" / "desk.toml")
    cfg = cfg.replace(stages=2, severity=[0.0, severity], seed=seed)
    stream = generate_stream(cfg)
    est = PromptDILClassifier(**cfg.estimator_params())
    for k, s in enumerate(stream.stages):
        est.partial_fit(s.train.X, s.train.y, classes=np.arange(cfg.classes) if k == 0 else None,
                        X_val=s.val.X, y_val=s.val.y)
    return (2, "expand") in est.events_, est.drift_reports_[2].mean_drift, len(est.network_.pool.active)


def test_identical_stages_mostly_do_not_expand():
    outcomes = [_expanded_on_second_stage(0.0, seed) for seed in range(5)]
    kept = sum(not expanded for expanded, _, _ in outcomes)
    assert kept >= 4, [round(d, 3) for _, d, _ in outcomes]


def test_strong_shift_expands_within_bounds():
    expanded, drift, active = _expanded_on_second_stage(0.8, 0)
    assert expanded and drift >= 0.7
    assert 10 <= active <= 80
