import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import (
    central_difference,
    grad_rel_error,
    kl_scalar,
    single_head_attention,
    softmax_rows,
    triple_loop_matmul,
)

from promptdil import autodiff as ad
from promptdil.autodiff import Tape, Tensor
from promptdil.exceptions import ConfigurationError, ContractError, DimensionError


def grad_of(fn, *arrays):
    """Tape gradients of scalar ``fn(*tensors)`` with respect to every input."""
    xs = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*xs)
    return tape.gradient(out, xs)


def fd_of(fn, arrays, i, h=1e-5):
    def f(x):
        args = [Tensor(a) for a in arrays]
        args[i] = Tensor(x)
        return float(fn(*args).data)

    return central_difference(f, arrays[i], h)


# ------------------------------------------------------------------- matmul


def test_matmul_identity_and_scalar():
    a = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(ad.matmul(np.eye(3), a).data, a)
    assert ad.matmul([[2.0]], [[3.0]]).data.tolist() == [[6.0]]


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
    assert np.max(np.abs(ad.matmul(a, b).data - triple_loop_matmul(a, b))) < 1e-12


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(DimensionError):
        ad.matmul(np.ones(3), np.ones((3, 1)))


def test_matmul_associativity(rng):
    for _ in range(20):
        a, b, c = rng.normal(size=(3, 4)), rng.normal(size=(4, 5)), rng.normal(size=(5, 2))
        left = ad.matmul(ad.matmul(a, b), c).data
        right = ad.matmul(a, ad.matmul(b, c)).data
        assert np.max(np.abs(left - right)) < 1e-9


def test_batched_matmul_gradient(rng):
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 2))
    fn = lambda x, y: ad.sum_(ad.matmul(x, y) ** 2)  # noqa: E731
    ga, gb = grad_of(fn, a, b)
    assert grad_rel_error(ga, fd_of(fn, [a, b], 0)) < 1e-6
    assert grad_rel_error(gb, fd_of(fn, [a, b], 1)) < 1e-6


# --------------------------------------------------------------- layer norm


def test_layer_norm_examples():
    assert np.array_equal(ad.layer_norm([[5.0, 5.0, 5.0]]).data, [[0.0, 0.0, 0.0]])
    out = ad.layer_norm([[-1.0, 1.0]], eps=0.0).data
    assert np.allclose(out, [[-1.0, 1.0]], atol=1e-15)


def test_layer_norm_moments(rng):
    x = rng.normal(3.0, 5.0, size=(20, 32))
    y = ad.layer_norm(x, eps=0.0).data
    assert np.max(np.abs(y.mean(axis=-1))) < 1e-12
    assert np.max(np.abs(y.var(axis=-1) - 1.0)) < 1e-9


def test_layer_norm_empty_axis():
    with pytest.raises(DimensionError):
        ad.layer_norm(np.ones((2, 0)))


# --------------------------------------------------------------------- gelu


def test_gelu_examples():
    assert ad.gelu([0.0]).data[0] == 0.0
    assert abs(ad.gelu([10.0]).data[0] - 10.0) < 1e-12
    phi1 = 0.5 * (1 + math.erf(1 / math.sqrt(2)))
    assert abs(ad.gelu([1.0]).data[0] - phi1) < 1e-15
    assert abs(phi1 - 0.8413447460685429) < 1e-15


# ---------------------------------------------------------- softmax and KL


def test_softmax_and_kl_examples():
    assert np.allclose(ad.softmax([0.0, 0.0]).data, [0.5, 0.5])
    p = np.array([0.7, 0.3])
    assert abs(float(ad.kl_divergence(p, p).data)) < 1e-15
    expected = 0.7 * math.log(0.7 / 0.5) + 0.3 * math.log(0.3 / 0.5)
    assert abs(float(ad.kl_divergence(p, [0.5, 0.5]).data) - expected) < 1e-15
    assert abs(expected - kl_scalar([0.7, 0.3], [0.5, 0.5])) < 1e-15


def test_kl_rejects_unnormalized_target():
    with pytest.raises(ContractError):
        ad.kl_divergence([0.7, 0.7], [0.5, 0.5])
    with pytest.raises(ContractError):
        ad.kl_divergence([1.2, -0.2], [0.5, 0.5])


@given(st.lists(st.floats(-30, 30), min_size=1, max_size=12))
def test_softmax_rows_sum_to_one(values):
    out = ad.softmax(np.array(values)).data
    assert abs(out.sum() - 1.0) < 1e-12
    assert np.all(out >= 0)


def test_kl_nonnegative(rng):
    for _ in range(50):
        p = softmax_rows(rng.normal(size=5))
        q = softmax_rows(rng.normal(size=5))
        assert float(ad.kl_divergence(p, q).data) >= 0.0


# ---------------------------------------------------------------- attention


def test_attention_single_slot(rng):
    q = rng.normal(size=(3, 8))
    keys, values = rng.normal(size=(1, 8)), rng.normal(size=(1, 8))
    out = ad.multi_head_attention(q, keys, values, heads=2).data
    assert np.allclose(out, np.broadcast_to(values, (3, 8)), atol=1e-15)


def test_attention_identical_keys_average_values(rng):
    q = rng.normal(size=(2, 8))
    keys = np.tile(rng.normal(size=(1, 8)), (5, 1))
    values = rng.normal(size=(5, 8))
    out = ad.multi_head_attention(q, keys, values, heads=4).data
    assert np.allclose(out, np.broadcast_to(values.mean(axis=0), (2, 8)), atol=1e-14)


def test_attention_matches_single_head_oracle(rng):
    q, k, v = rng.normal(size=(3, 6)), rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
    out = ad.multi_head_attention(q, k, v, heads=1).data
    assert np.max(np.abs(out - single_head_attention(q, k, v))) < 1e-10


def test_attention_heads_match_per_head_oracle(rng):
    q, k, v = rng.normal(size=(3, 8)), rng.normal(size=(5, 8)), rng.normal(size=(5, 8))
    out = ad.multi_head_attention(q, k, v, heads=2).data
    expected = np.hstack([single_head_attention(q[:, s], k[:, s], v[:, s]) for s in (slice(0, 4), slice(4, 8))])
    assert np.max(np.abs(out - expected)) < 1e-12


def test_attention_head_divisibility():
    with pytest.raises(ConfigurationError):
        ad.multi_head_attention(np.ones((1, 6)), np.ones((2, 6)), np.ones((2, 6)), heads=4)


# ----------------------------------------------------------------- backward


def test_backward_examples():
    (g,) = grad_of(lambda x: x * x, np.array(3.0))
    assert g == 6.0
    (g,) = grad_of(lambda x: Tensor(5.0) + x * 0.0, np.array(2.0))
    assert g == 0.0


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ContractError):
        tape.backward(y)


def test_untracked_tensors_receive_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    c = Tensor(np.arange(3.0))
    with Tape() as tape:
        loss = ad.sum_(x * c)
    grads = tape.backward(loss)
    assert x in grads and c not in grads
    assert np.array_equal(grads[x], np.arange(3.0))


def test_no_tape_no_recording():
    x = Tensor(np.ones(2), requires_grad=True)
    y = x * 3.0
    assert not y.requires_grad


def test_reverse_order_accumulates_shared_inputs():
    x = Tensor(2.0, requires_grad=True)
    with Tape() as tape:
        y = x * x
        z = y * x + y
    (g,) = tape.gradient(z, [x])
    assert g == 3 * 4.0 + 2 * 2.0


def test_stop_gradient_blocks():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_(ad.stop_gradient(x) * x)
    (g,) = tape.gradient(loss, [x])
    assert np.array_equal(g, np.ones(3))


# ----------------------------------------- primitive gradients vs central FD

UNARY = {
    "exp": lambda x: ad.sum_(ad.exp(x) * Tensor([1.0, -2.0, 0.5])),
    "log": lambda x: ad.sum_(ad.log(x * x + 1.0)),
    "sqrt": lambda x: ad.sum_(ad.sqrt(x * x + 0.5)),
    "power": lambda x: ad.sum_(ad.power(x * x + 1.0, 1.7)),
    "gelu": lambda x: ad.sum_(ad.gelu(x) * Tensor([0.3, 1.0, -0.7])),
    "softmax": lambda x: ad.sum_(ad.softmax(x) * Tensor([0.3, 1.0, -0.7])),
    "log_softmax": lambda x: ad.sum_(ad.log_softmax(x) * Tensor([0.3, 1.0, -0.7])),
    "layer_norm": lambda x: ad.sum_(ad.layer_norm(x) * Tensor([0.3, 1.0, -0.7])),
    "l2_normalize": lambda x: ad.sum_(ad.l2_normalize(x) * Tensor([0.3, 1.0, -0.7])),
    "div": lambda x: ad.sum_(Tensor([1.0, 2.0, 3.0]) / (x * x + 1.0)),
    "abs": lambda x: ad.sum_(ad.abs_(x) * Tensor([0.3, 1.0, -0.7])),
    "getitem": lambda x: ad.sum_(x[1:] * x[:2]),
    "concat": lambda x: ad.sum_(ad.concat([x, x * x]) * Tensor(np.arange(6.0))),
    "cross_entropy": lambda x: ad.cross_entropy(ad.reshape(x, (1, 3)), [2]),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_primitive_gradients(name):
    fn = UNARY[name]
    worst = 0.0
    for seed in range(100):
        x = np.random.default_rng(seed).normal(size=3)
        if name == "abs":
            x = np.where(np.abs(x) < 1e-3, 0.5, x)
        (g,) = grad_of(fn, x)
        worst = max(worst, grad_rel_error(g, fd_of(fn, [x], 0)))
    assert worst < 1e-4


def test_matrix_primitive_gradients():
    def fn(a, b, gain, bias):
        h = ad.layer_norm(a @ b, gain, bias)
        return ad.sum_(ad.gelu(h) * ad.softmax(h, axis=0))

    worst = 0.0
    for seed in range(100):
        r = np.random.default_rng(seed)
        arrays = [r.normal(size=(3, 4)), r.normal(size=(4, 5)), r.normal(size=5), r.normal(size=5)]
        grads = grad_of(fn, *arrays)
        for i, g in enumerate(grads):
            worst = max(worst, grad_rel_error(g, fd_of(fn, arrays, i)))
    assert worst < 1e-4


def test_attention_gradient():
    worst = 0.0
    for seed in range(100):
        r = np.random.default_rng(seed)
        arrays = [r.normal(size=(2, 4)), r.normal(size=(3, 4)), r.normal(size=(3, 4)),
                  r.normal(size=(4, 4)), r.normal(size=(4, 4))]

        def fn(q, k, v, wq, wo):
            out = ad.multi_head_attention(q, k, v, heads=2, w_q=wq, w_o=wo)
            return ad.sum_(out * out)

        grads = grad_of(fn, *arrays)
        for i, g in enumerate(grads):
            worst = max(worst, grad_rel_error(g, fd_of(fn, arrays, i)))
    assert worst < 1e-4


def test_reproducible_buffers():
    a = [ad.gelu(np.random.default_rng(3).normal(size=10)).data for _ in range(2)]
    assert a[0].tobytes() == a[1].tobytes()
