#!/usr/bin/env python3
"""
测试张量运算、反向传播与 MLP 头
"""
import math
import sys
from pathlib import Path

import numpy as np
import pytest

# 添加项目路径
sys.path.insert(0, str(Path(__file__).parent))

from gbnet import tensor_core as tc
from gbnet.errors import NonFiniteError, ShapeError, TapeStateError
from gbnet.tensor_core import MLPHead, Tape, backprop, evaluate_mlp_head, gradient_check


def test_matvec_examples():
    x = tc.constant([1.0, 1.0])
    assert tc.matvec(tc.constant(np.eye(2)), x).data.ravel().tolist() == [1.0, 1.0]
    assert tc.matvec(tc.constant([[1.0, 2.0], [3.0, 4.0]]), x).data.ravel().tolist() == [3.0, 7.0]
    assert not tc.matvec(tc.constant(np.zeros((3, 2))), x).data.any()
    with pytest.raises(ShapeError):
        tc.matvec(tc.constant(np.zeros((2, 3))), x)


@pytest.mark.parametrize("logits, expected", [
    ((0.0, 0.0), (0.5, 0.5)),
    ((1000.0, 1000.0), (0.5, 0.5)),
    ((math.log(1.0), math.log(3.0)), (0.25, 0.75)),
])
def test_softmax_examples(logits, expected):
    out = tc.row_softmax_stable(tc.constant(logits)).data.ravel()
    assert out == pytest.approx(expected, abs=1e-12)
    assert out.sum() == pytest.approx(1.0)


def test_row_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    for _ in range(200):
        rows, cols = (int(v) for v in rng.integers(1, 9, size=2))
        scale = 10.0 ** float(rng.uniform(-2, 3))
        y = tc.row_softmax(tc.constant(rng.normal(scale=scale, size=(rows, cols)))).data
        assert np.abs(y.sum(axis=1) - 1.0).max() <= 1e-12
        assert (y >= 0).all()


def test_row_softmax_shift_invariant():
    """每行加同一常数，输出不变"""
    rng = np.random.default_rng(1)
    for _ in range(200):
        rows, cols = (int(v) for v in rng.integers(1, 9, size=2))
        logits = rng.normal(scale=5.0, size=(rows, cols))
        shift = rng.uniform(-100.0, 100.0, size=(rows, 1))
        base = tc.row_softmax(tc.constant(logits)).data
        moved = tc.row_softmax(tc.constant(logits + shift)).data
        assert np.allclose(moved, base, rtol=0.0, atol=1e-12)


def test_backprop_sum_gives_ones():
    x = tc.parameter(np.arange(6.0).reshape(3, 2), name="x")
    with Tape() as tape:
        loss = tc.sum(x)
    grads = backprop(loss, tape=tape)
    assert np.array_equal(grads[x], np.ones((3, 2)))
    assert np.array_equal(x.grad, np.ones((3, 2)))
    assert len(tape) == 0


def test_backprop_relu_hand_chain_rule():
    W = tc.parameter([[1.0, -1.0]], name="W")
    x = tc.constant([2.0, 1.0])
    with Tape() as tape:
        loss = tc.sum(tc.relu(tc.matvec(W, x)))
    grads = backprop(loss, tape=tape)
    assert grads[W].tolist() == [[2.0, 1.0]]


def test_backprop_accumulate_flag():
    w = tc.parameter([[3.0]])
    for _ in range(2):
        with Tape() as tape:
            loss = tc.mul(w, w)
        backprop(loss, tape=tape)
    assert w.grad.tolist() == [[12.0]]

    w.zero_grad()
    with Tape() as tape:
        loss = tc.mul(w, w)
    grads = backprop(loss, tape=tape, accumulate=False)
    assert grads[w].tolist() == [[6.0]]
    assert w.grad is None


def test_backprop_without_tape():
    w = tc.parameter([[1.0]])
    loss = tc.sum(w)
    with pytest.raises(TapeStateError):
        backprop(loss)


def test_non_finite_is_detected():
    with pytest.raises(NonFiniteError):
        tc.log(tc.constant([[0.0]]))
    with pytest.raises(NonFiniteError):
        tc.constant([[float("nan")]])


def test_add_row_broadcast_gradient():
    a = tc.parameter(np.ones((3, 2)))
    b = tc.parameter([[1.0, 2.0]])
    with Tape() as tape:
        loss = tc.sum(tc.add(a, b))
    grads = backprop(loss, tape=tape)
    assert grads[b].tolist() == [[3.0, 3.0]]
    with pytest.raises(ShapeError):
        tc.add(a, tc.constant(np.ones((2, 2))))


def test_gradient_check_random_composites():
    """200 个随机复合函数的解析梯度与中心差分一致"""
    rng = np.random.default_rng(42)
    for _ in range(200):
        d = int(rng.integers(2, 9))
        squash = tc.tanh if rng.random() < 0.5 else tc.sigmoid
        W = tc.parameter(rng.normal(size=(d, d)), name="W")
        V = tc.parameter(rng.normal(size=(3, d)), name="V")
        b = tc.parameter(rng.normal(size=(1, d)), name="b")
        x = tc.constant(rng.normal(size=(4, d)))
        target = tc.constant(np.eye(3)[rng.integers(0, 3, size=4)])

        def loss_fn():
            h = squash(tc.add(tc.matmul_nt(x, W), b))
            g = tc.sigmoid(tc.matmul_nt(h, W))
            p = tc.row_softmax(tc.matmul_nt(tc.mul(h, g), V))
            picked = tc.sum(tc.mul(p, target), axis=1)
            return tc.scale(tc.sum(tc.log(picked)), -1.0)

        assert gradient_check(loss_fn, [W, V, b]) <= 1e-4


def test_concat_and_transpose_gradients():
    rng = np.random.default_rng(3)
    a = tc.parameter(rng.normal(size=(2, 3)))
    b = tc.parameter(rng.normal(size=(2, 1)))

    def loss_fn():
        joined = tc.concat([a, b], axis=1)
        return tc.sum(tc.mul(tc.matmul(joined, tc.transpose(joined)), tc.constant(np.ones((2, 2)))))

    assert gradient_check(loss_fn, [a, b]) <= 1e-4


def test_mlp_head_examples():
    zero = MLPHead(*(tc.constant(np.zeros(shape)) for shape in ((2, 3), (1, 2), (4, 2), (1, 4))))
    assert not evaluate_mlp_head(zero, tc.constant([1.0, 2.0, 3.0])).data.any()

    identity = MLPHead(tc.constant(np.eye(3)), tc.constant(np.zeros((1, 3))),
                       tc.constant(np.eye(3)), tc.constant(np.zeros((1, 3))))
    x = tc.constant([0.5, 0.0, 2.0])
    assert evaluate_mlp_head(identity, x).data.ravel().tolist() == [0.5, 0.0, 2.0]

    hand = MLPHead(tc.constant([[1.0], [-1.0]]), tc.constant(np.zeros((1, 2))),
                   tc.constant([[1.0, 1.0]]), tc.constant(np.zeros((1, 1))))
    assert evaluate_mlp_head(hand, tc.constant([2.0])).item() == 2.0


def test_mlp_head_shape_mismatch():
    head = MLPHead(tc.constant(np.zeros((2, 3))), tc.constant(np.zeros((1, 2))),
                   tc.constant(np.zeros((1, 3))), tc.constant(np.zeros((1, 1))))
    with pytest.raises(ShapeError):
        evaluate_mlp_head(head, tc.constant([1.0, 2.0, 3.0]))
