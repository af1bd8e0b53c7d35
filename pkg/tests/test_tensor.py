"""Tensor engine tests: pinned small cases plus finite-difference checks."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import check_op_grads, fd_grad, max_rel_err
from occlm import tensor as T
from occlm.errors import (
    ContractError,
    NumericsError,
    ShapeError,
    TokenIndexError,
)

SEEDS = list(range(10))


def randt(rng, *shape):
    return T.Tensor(rng.standard_normal(shape), requires_grad=True)


# ---------------------------------------------------------------- forward


def test_matmul_identity():
    a = T.Tensor(np.eye(3))
    b = T.Tensor(np.arange(9, dtype=np.float32).reshape(3, 3))
    out = T.matmul(a, b)
    np.testing.assert_array_equal(out.data, b.data)


def test_matmul_pinned():
    a = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = T.Tensor([[1.0], [1.0]])
    out = T.matmul(a, b)
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_shape_error_names_shapes():
    a = T.Tensor(np.zeros((2, 3)))
    b = T.Tensor(np.zeros((4, 2)))
    with pytest.raises(ShapeError) as exc:
        T.matmul(a, b)
    assert "(2, 3)" in str(exc.value) and "(4, 2)" in str(exc.value)


def test_softmax_uniform():
    out = T.softmax_lastdim(T.Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3] * 3, rtol=1e-6)


def test_softmax_large_logit_stable():
    out = T.softmax_lastdim(T.Tensor([1000.0, 0.0]))
    np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-30)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    out = T.softmax_lastdim(T.Tensor(rng.standard_normal((4, 5, 6))))
    np.testing.assert_allclose(out.data.sum(axis=-1), np.ones((4, 5)), rtol=1e-5)


def test_cross_entropy_uniform_logits():
    logits = T.Tensor(np.zeros((2, 3, 7)))
    targets = np.zeros((2, 3), dtype=np.int64)
    loss = T.cross_entropy(logits, targets)
    np.testing.assert_allclose(loss.data, np.log(7.0), rtol=1e-6)


def test_cross_entropy_rejects_bad_target():
    logits = T.Tensor(np.zeros((1, 2, 5)))
    with pytest.raises(TokenIndexError):
        T.cross_entropy(logits, np.array([[0, 5]]))


def test_layer_norm_zero_mean_unit_var():
    rng = np.random.default_rng(3)
    x = T.Tensor(rng.standard_normal((4, 8)) * 5 + 2)
    g = T.Tensor(np.ones(8))
    b = T.Tensor(np.zeros(8))
    out = T.layer_norm(x, g, b)
    np.testing.assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-5)
    np.testing.assert_allclose(out.data.var(axis=-1), 1.0, atol=1e-3)


def test_gelu_pinned_points():
    out = T.gelu(T.Tensor([0.0, 100.0, -100.0]))
    np.testing.assert_allclose(out.data, [0.0, 100.0, 0.0], atol=1e-5)


def test_relu():
    out = T.relu(T.Tensor([-2.0, 0.0, 3.0]))
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 3.0])


def test_causal_mask_upper_triangle_filled():
    x = T.Tensor(np.zeros((2, 4, 4)))
    out = T.causal_mask_fill(x)
    for i in range(4):
        for j in range(4):
            expect = 0.0 if j <= i else -1e9
            assert out.data[0, i, j] == expect


def test_causal_mask_requires_square():
    with pytest.raises(ShapeError):
        T.causal_mask_fill(T.Tensor(np.zeros((2, 3, 4))))


def test_embedding_lookup_gathers_rows():
    table = T.Tensor(np.arange(12, dtype=np.float32).reshape(4, 3))
    out = T.embedding_lookup(table, np.array([[3, 0], [1, 1]]))
    np.testing.assert_array_equal(out.data[0, 0], table.data[3])
    np.testing.assert_array_equal(out.data[1, 1], table.data[1])


def test_embedding_lookup_rejects_out_of_range():
    table = T.Tensor(np.zeros((4, 3)))
    with pytest.raises(TokenIndexError):
        T.embedding_lookup(table, np.array([4]))
    with pytest.raises(TokenIndexError):
        T.embedding_lookup(table, np.array([-1]))


def test_outputs_are_float32():
    rng = np.random.default_rng(1)
    x = T.Tensor(rng.standard_normal((3, 3)))
    for out in (T.add(x, x), T.matmul(x, x), T.gelu(x), T.softmax_lastdim(x)):
        assert out.data.dtype == np.float32


def test_nan_rejected_at_construction():
    with pytest.raises(NumericsError):
        T.Tensor([1.0, np.nan, 2.0])
    with pytest.raises(NumericsError):
        T.Tensor([np.inf])


def test_overflow_raises_numerics_error():
    x = T.Tensor(np.full((2,), 3e38))
    with pytest.raises(NumericsError):
        T.add(x, x)


# --------------------------------------------------------------- backward


def test_backward_sum_gives_ones():
    x = T.Tensor(np.arange(6, dtype=np.float32).reshape(2, 3), requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum_all(x)
        T.backward(loss, tape)
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_sum_of_squares():
    x = T.Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum_all(T.mul(x, x))
        T.backward(loss, tape)
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_requires_scalar():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with T.Tape() as tape:
        y = T.add(x, x)
        with pytest.raises(ShapeError):
            T.backward(y, tape)


def test_backward_without_tape_raises():
    x = T.Tensor(np.ones(1), requires_grad=True)
    with pytest.raises(ContractError):
        T.backward(T.sum_all(x))


def test_grads_accumulate_across_backward_calls():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    for _ in range(2):
        with T.Tape() as tape:
            loss = T.sum_all(T.mul(x, x))
            T.backward(loss, tape)
    np.testing.assert_allclose(x.grad, [4.0, 8.0], rtol=1e-6)


def test_no_tape_records_nothing():
    x = T.Tensor(np.ones(3), requires_grad=True)
    y = T.add(x, x)
    assert y.data is not None
    with T.Tape() as tape:
        T.add(x, x)
    assert len(tape.entries) == 1


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_matmul(seed):
    rng = np.random.default_rng(seed)
    a = randt(rng, 3, 4)
    b = randt(rng, 4, 2)
    check_op_grads(lambda a, b: T.matmul(a, b), [a, b], h=1e-3, seed=seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_matmul_batched_broadcast(seed):
    rng = np.random.default_rng(seed)
    a = randt(rng, 2, 3, 4)
    b = randt(rng, 4, 3)
    check_op_grads(lambda a, b: T.matmul(a, b), [a, b], h=1e-3, seed=seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_add_broadcast(seed):
    rng = np.random.default_rng(seed)
    a = randt(rng, 3, 4)
    b = randt(rng, 4)
    check_op_grads(lambda a, b: T.add(a, b), [a, b], h=1e-3, seed=seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_mul(seed):
    rng = np.random.default_rng(seed)
    a = randt(rng, 2, 5)
    b = randt(rng, 2, 5)
    check_op_grads(lambda a, b: T.mul(a, b), [a, b], h=1e-3, seed=seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_softmax(seed):
    rng = np.random.default_rng(seed)
    x = randt(rng, 3, 6)
    check_op_grads(lambda x: T.softmax_lastdim(x), [x], h=1e-2, seed=seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_layer_norm(seed):
    rng = np.random.default_rng(seed)
    x = randt(rng, 4, 6)
    g = randt(rng, 6)
    b = randt(rng, 6)
    check_op_grads(lambda x, g, b: T.layer_norm(x, g, b), [x, g, b], h=1e-2, seed=seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_gelu(seed):
    rng = np.random.default_rng(seed)
    x = randt(rng, 5, 5)
    check_op_grads(lambda x: T.gelu(x), [x], h=1e-2, seed=seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_transpose_reshape(seed):
    rng = np.random.default_rng(seed)
    x = randt(rng, 2, 3, 4)

    def op(x):
        return T.reshape(T.transpose(x, (0, 2, 1)), (4, 6))

    check_op_grads(op, [x], h=1e-3, seed=seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_embedding(seed):
    rng = np.random.default_rng(seed)
    table = randt(rng, 7, 4)
    ids = rng.integers(0, 7, size=(2, 3))
    check_op_grads(lambda t: T.embedding_lookup(t, ids), [table], h=1e-3, seed=seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_cross_entropy(seed):
    rng = np.random.default_rng(seed)
    logits = randt(rng, 2, 4, 9)
    targets = rng.integers(0, 9, size=(2, 4))
    ignore = rng.random((2, 4)) < 0.2
    ignore[0, 0] = False

    def f64_loss():
        return float(T.cross_entropy(logits, targets, ignore_mask=ignore).data)

    with T.Tape() as tape:
        loss = T.cross_entropy(logits, targets, ignore_mask=ignore)
        T.backward(loss, tape)
    num = fd_grad(f64_loss, [logits], h=1e-2)[0]
    assert max_rel_err(logits.grad, num, floor=0.5) <= 1e-3
    ignored_cols = np.where(ignore)
    assert np.all(logits.grad[ignored_cols] == 0.0)


def test_cross_entropy_matches_manual_logsumexp():
    rng = np.random.default_rng(11)
    raw = rng.standard_normal((3, 5, 8)).astype(np.float32)
    targets = rng.integers(0, 8, size=(3, 5))
    loss = T.cross_entropy(T.Tensor(raw), targets)
    x = raw.astype(np.float64)
    lse = np.log(np.exp(x - x.max(-1, keepdims=True)).sum(-1)) + x.max(-1)
    picked = np.take_along_axis(x, targets[..., None], axis=-1)[..., 0]
    np.testing.assert_allclose(float(loss.data), (lse - picked).mean(), rtol=1e-5)


# ---------------------------------------------------------------- dropout


def test_dropout_identity_in_eval():
    x = T.Tensor(np.ones((4, 4)))
    out = T.dropout(x, 0.5, train=False, rng=None)
    np.testing.assert_array_equal(out.data, x.data)


def test_dropout_zero_prob_identity():
    x = T.Tensor(np.ones((4, 4)))
    out = T.dropout(x, 0.0, train=True, rng=np.random.default_rng(0))
    np.testing.assert_array_equal(out.data, x.data)


def test_dropout_requires_rng_in_train():
    x = T.Tensor(np.ones(4))
    with pytest.raises(ContractError):
        T.dropout(x, 0.5, train=True, rng=None)


def test_dropout_rejects_bad_prob():
    x = T.Tensor(np.ones(4))
    for p in (-0.1, 1.0, 1.5):
        with pytest.raises(ContractError):
            T.dropout(x, p, train=True, rng=np.random.default_rng(0))


def test_dropout_kept_fraction_and_scale():
    n = 100_000
    p = 0.3
    x = T.Tensor(np.ones(n))
    out = T.dropout(x, p, train=True, rng=np.random.default_rng(42))
    kept = out.data != 0.0
    frac = kept.mean()
    sigma = np.sqrt(p * (1 - p) / n)
    assert abs(frac - (1 - p)) < 3 * sigma
    np.testing.assert_allclose(out.data[kept], 1.0 / (1 - p), rtol=1e-5)


def test_dropout_grad_masks_match_forward():
    rng = np.random.default_rng(7)
    x = T.Tensor(np.ones(64), requires_grad=True)
    with T.Tape() as tape:
        out = T.dropout(x, 0.5, train=True, rng=rng)
        T.backward(T.sum_all(out), tape)
    np.testing.assert_allclose(x.grad, (out.data != 0) * 2.0, rtol=1e-6)


# ------------------------------------------------------------- properties


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_softmax_invariant_to_shift(seed):
    # integer logits so the +100 shift is exact in float32
    rng = np.random.default_rng(seed)
    x = rng.integers(-5, 6, size=(2, 5)).astype(np.float32)
    a = T.softmax_lastdim(T.Tensor(x))
    b = T.softmax_lastdim(T.Tensor(x + 100.0))
    np.testing.assert_array_equal(a.data, b.data)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_same_seed_same_dropout(seed):
    x = T.Tensor(np.ones(256))
    a = T.dropout(x, 0.4, train=True, rng=np.random.default_rng(seed))
    b = T.dropout(x, 0.4, train=True, rng=np.random.default_rng(seed))
    np.testing.assert_array_equal(a.data, b.data)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_matmul_grad_property(seed):
    rng = np.random.default_rng(seed)
    m, k, n = rng.integers(1, 5, size=3)
    a = T.Tensor(rng.standard_normal((m, k)), requires_grad=True)
    b = T.Tensor(rng.standard_normal((k, n)), requires_grad=True)
    probe = rng.standard_normal((m, n)).astype(np.float32)
    with T.Tape() as tape:
        loss = T.sum_all(T.mul(T.matmul(a, b), T.Tensor(probe)))
        T.backward(loss, tape)
    np.testing.assert_allclose(
        a.grad, probe.astype(np.float64) @ b.data.T.astype(np.float64), rtol=1e-4, atol=1e-5
    )
    np.testing.assert_allclose(
        b.grad, a.data.T.astype(np.float64) @ probe.astype(np.float64), rtol=1e-4, atol=1e-5
    )
