import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from colearn import tensorcore as tc
from colearn.tensorcore import Tape, Tensor, grad_check, grad_check_report


def leaf(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def probs(rng, rows, cols):
    x = rng.random((rows, cols)) + 0.05
    return x / x.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------- tape mechanics

def test_backward_accumulates_into_leaves():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        y = tc.sum(tc.add(tc.mul(x, x), x))
    tape.backward(y)
    np.testing.assert_array_equal(x.grad, [3.0, 5.0])


def test_second_backward_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = tc.sum(tc.scale(x, 2.0))
    tape.backward(y)
    with pytest.raises(RuntimeError):
        tape.backward(y)


def test_ops_outside_tape_are_not_recorded():
    x = Tensor(np.ones(3), requires_grad=True)
    y = tc.sum(tc.mul(x, x))
    with Tape() as tape:
        pass
    assert len(tape) == 0
    assert y.data == 3.0


def test_shared_subexpression_visited_once():
    x = Tensor(np.array([2.0]), requires_grad=True)
    with Tape() as tape:
        h = tc.mul(x, x)
        y = tc.sum(tc.add(h, h))
    tape.backward(y)
    np.testing.assert_allclose(x.grad, [8.0])


# ---------------------------------------------------------------- softmax family

def test_softmax_examples():
    out = tc.softmax_rows(Tensor(np.zeros((1, 3)))).data
    np.testing.assert_allclose(out, [[1 / 3] * 3], atol=1e-15)
    out = tc.softmax_rows(Tensor(np.log([[1.0, 2.0, 3.0]]))).data
    np.testing.assert_allclose(out, [[1 / 6, 2 / 6, 3 / 6]], atol=1e-15)


def test_softmax_large_logits_against_arbitrary_precision():
    out = tc.softmax_rows(Tensor(np.array([[1000.0, 0.0, 0.0]]))).data[0]
    mpmath.mp.dps = 50
    z = mpmath.exp(1000) + 2
    oracle = [float(mpmath.exp(1000) / z), float(1 / z), float(1 / z)]
    np.testing.assert_allclose(out, oracle, rtol=1e-12, atol=0)
    assert np.all(np.isfinite(out))


def test_empty_distribution_rejected():
    with pytest.raises(ValueError, match="empty distribution"):
        tc.softmax_rows(Tensor(np.zeros((2, 0))))
    with pytest.raises(ValueError, match="empty distribution"):
        tc.log_softmax(Tensor(np.zeros((2, 0))))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 7)),
              elements=st.floats(-1e4, 1e4)))
def test_softmax_rows_sum_to_one(x):
    out = tc.softmax_rows(Tensor(x)).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(np.exp(tc.log_softmax(Tensor(x)).data), out, atol=1e-12)


# ---------------------------------------------------------------- KL

def test_kl_examples():
    half = np.array([[0.5, 0.5]])
    assert tc.kl_rows(half, half).data[0] == 0.0
    assert tc.kl_rows(np.array([[1.0, 0.0]]), half).data[0] == pytest.approx(math.log(2), abs=1e-12)


def test_kl_matches_direct_summation():
    rng = np.random.default_rng(7)
    p, q = probs(rng, 1, 4), probs(rng, 1, 4)
    oracle = sum(p[0, v] * math.log(p[0, v] / q[0, v]) for v in range(4))
    assert tc.kl_rows(p, q).data[0] == pytest.approx(oracle, abs=1e-10)
    log_form = tc.kl_log_rows(np.log(p), np.log(q)).data[0]
    assert log_form == pytest.approx(oracle, abs=1e-10)


def test_kl_clamps_zero_q_and_counts():
    tc.counters.clear()
    val = tc.kl_rows(np.array([[0.5, 0.5]]), np.array([[1.0, 0.0]])).data[0]
    assert np.isfinite(val)
    assert tc.counters["kl-clamp"] == 1


def test_kl_detach_blocks_gradient_to_target():
    rng = np.random.default_rng(0)
    x = leaf(rng, 3, 4)
    y = leaf(rng, 3, 4)
    with Tape() as tape:
        out = tc.sum(tc.kl_log_rows(tc.log_softmax(x), tc.log_softmax(y), detach_p=True))
    tape.backward(out)
    assert x.grad is None or not np.any(x.grad)
    assert np.any(y.grad)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
def test_kl_self_zero_and_nonnegative(seed, cols):
    rng = np.random.default_rng(seed)
    p, q = probs(rng, 3, cols), probs(rng, 3, cols)
    assert np.all(np.abs(tc.kl_rows(p, p).data) <= 1e-9)
    assert np.all(tc.kl_rows(p, q).data >= -1e-9)
    assert np.all(tc.kl_log_rows(np.log(p), np.log(q)).data >= -1e-9)


# ---------------------------------------------------------------- layer norm, cosine

def test_layer_norm_examples():
    g, b = Tensor(np.ones(3)), Tensor(np.zeros(3))
    np.testing.assert_array_equal(tc.layer_norm(Tensor(np.ones((1, 3))), g, b).data, [[0, 0, 0]])
    out = tc.layer_norm(Tensor(np.array([[-1.0, 1.0]])), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    expected = 1 / math.sqrt(1 + 1e-5)
    np.testing.assert_allclose(out, [[-expected, expected]], atol=1e-15)


def test_layer_norm_moments():
    x = np.random.default_rng(3).standard_normal((1, 64))
    out = tc.layer_norm(Tensor(x), Tensor(np.ones(64)), Tensor(np.zeros(64))).data
    assert abs(out.mean()) < 1e-4
    assert abs(out.var() - 1) < 1e-4


def test_cosine_examples():
    assert tc.cosine_sim([1.0, 2, 3], [1.0, 2, 3]).data == pytest.approx(1.0, abs=1e-12)
    assert tc.cosine_sim([1.0, 0], [0.0, 1]).data == 0.0
    assert tc.cosine_sim([1.0, 1], [1.0, 0]).data == pytest.approx(1 / math.sqrt(2), abs=1e-12)


def test_cosine_zero_vector_counts():
    tc.counters.clear()
    assert tc.cosine_sim([0.0, 0.0], [1.0, 2.0]).data == 0.0
    assert tc.counters["degenerate-cosine"] == 1


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 5, elements=st.floats(-1e3, 1e3)),
       arrays(np.float64, 5, elements=st.floats(-1e3, 1e3)))
def test_cosine_bounded(u, v):
    val = float(tc.cosine_sim(u, v).data)
    assert -1 - 1e-9 <= val <= 1 + 1e-9


# ---------------------------------------------------------------- dropout

def test_dropout_eval_identity_and_train_scaling():
    x = Tensor(np.ones((200, 50)))
    assert tc.dropout(x, 0.3, np.random.default_rng(0), train=False) is x
    out = tc.dropout(x, 0.3, np.random.default_rng(0), train=True).data
    kept = out != 0
    np.testing.assert_allclose(out[kept], 1 / 0.7)
    assert abs(kept.mean() - 0.7) < 0.02


def test_dropout_replayable_from_seed():
    x = Tensor(np.ones((4, 4)))
    a = tc.dropout(x, 0.5, np.random.default_rng(9), train=True).data
    b = tc.dropout(x, 0.5, np.random.default_rng(9), train=True).data
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------- gradient checks

def test_grad_check_softmax_sum_is_flat():
    x = leaf(np.random.default_rng(1), 3, 4)
    rep = grad_check_report(lambda: tc.sum(tc.softmax_rows(x)), [x], eps=1e-4)
    # the true gradient is zero, so only the absolute error is meaningful here:
    # finite-difference rounding (~1e-12) divided by the 1e-8 floor dominates max_rel
    assert rep.max_abs < 1e-8


def test_grad_check_kl_detached():
    rng = np.random.default_rng(2)
    p = probs(rng, 3, 5)
    x = leaf(rng, 3, 5)
    err = grad_check(lambda: tc.sum(tc.kl_rows(p, tc.softmax_rows(x), detach_p=True)), [x], eps=1e-4)
    assert err < 1e-4


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_rejects_nonfinite_objective():
    x = Tensor(np.array([-1.0, 2.0]), requires_grad=True)
    with pytest.raises(FloatingPointError, match="non-finite objective"):
        grad_check(lambda: tc.sum(tc.log(x)), [x])


def _primitive_cases(rng):
    """(name, objective builder, leaves) for every primitive in the catalog."""
    a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
    c, d = leaf(rng, 3, 4), leaf(rng, 3, 2)
    w, bias = leaf(rng, 4, 5), leaf(rng, 5)
    table = leaf(rng, 6, 3)
    ids = rng.integers(0, 6, size=(2, 4))
    proj = rng.standard_normal((3, 4))
    drop_seed = int(rng.integers(1 << 30))
    gold = rng.integers(0, 4, size=3)
    g, beta = leaf(rng, 4), leaf(rng, 4)
    q, k, v = leaf(rng, 2, 3, 4), leaf(rng, 2, 5, 4), leaf(rng, 2, 5, 4)
    mask = np.where(rng.random((2, 1, 5)) < 0.2, -1e9, 0.0)
    mask[..., 0] = 0.0
    u, z = leaf(rng, 3, 4), leaf(rng, 2, 4)

    def weighted(t):
        return tc.sum(tc.mul(t, Tensor(rng_fixed(t.shape))))

    cache = {}

    def rng_fixed(shape):
        if shape not in cache:
            cache[shape] = np.random.default_rng(len(shape) * 31 + sum(shape)).standard_normal(shape)
        return cache[shape]

    return [
        ("matmul", lambda: weighted(tc.matmul(a, b)), [a, b]),
        ("add", lambda: weighted(tc.add(a, c)), [a, c]),
        ("mul", lambda: weighted(tc.mul(a, c)), [a, c]),
        ("scale", lambda: weighted(tc.scale(a, -1.7)), [a]),
        ("concat", lambda: weighted(tc.concat([c, d], axis=-1)), [c, d]),
        ("mean", lambda: weighted(tc.mean(a, axis=0)), [a]),
        ("embedding", lambda: weighted(tc.embedding(table, ids)), [table]),
        ("gelu", lambda: weighted(tc.gelu(a)), [a]),
        ("dropout", lambda: weighted(tc.dropout(a, 0.4, np.random.default_rng(drop_seed), True)), [a]),
        ("log_softmax", lambda: weighted(tc.log_softmax(a)), [a]),
        ("gather_logprobs", lambda: tc.sum(tc.gather_logprobs(tc.log_softmax(a), gold)), [a]),
        ("linear", lambda: weighted(tc.linear(a, w, bias)), [a, w, bias]),
        ("layer_norm", lambda: weighted(tc.layer_norm(c, g, beta)), [c, g, beta]),
        ("softmax_rows", lambda: weighted(tc.softmax_rows(a)), [a]),
        ("kl_log_rows", lambda: tc.sum(tc.kl_log_rows(tc.log_softmax(Tensor(proj)),
                                                      tc.log_softmax(a))), [a]),
        ("cosine_matrix", lambda: weighted(tc.cosine_matrix(u, z)), [u, z]),
        ("attention", lambda: weighted(tc.attention(q, k, v, 2, mask)), [q, k, v]),
        ("exp_log", lambda: weighted(tc.log(tc.exp(a))), [a]),
        ("transpose_reshape", lambda: weighted(tc.reshape(tc.transpose(a), (2, 6))), [a]),
    ]


@pytest.mark.parametrize("seed", range(20))
def test_every_primitive_gradient(seed):
    rng = np.random.default_rng(seed)
    for name, f, leaves in _primitive_cases(rng):
        err = grad_check(f, leaves, eps=1e-4)
        assert err < 1e-4, f"{name}: relative error {err:.2e} (seed {seed})"
