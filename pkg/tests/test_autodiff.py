"""Gradient and semantics checks for the autodiff engine."""

import numpy as np
import pytest

from causaliv.autodiff import (
    Tensor,
    avg_pool2d,
    conv2d,
    kl_divergence,
    log_softmax,
    nll_loss,
    no_grad,
    softmax,
)
from causaliv.gradcheck import gradcheck


def t64(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def test_arithmetic_gradients():
    rng = np.random.default_rng(0)
    a, b = t64(rng, 4, 3), t64(rng, 4, 3)

    def objective():
        return ((a * b + a / (b * b + 3.0) - 2.0 * b) ** 2).sum()

    gradcheck(objective, [a, b])


def test_broadcast_gradients():
    rng = np.random.default_rng(1)
    a, b = t64(rng, 5, 4), t64(rng, 4)

    def objective():
        return ((a + b) * (a - b)).mean()

    gradcheck(objective, [a, b])


def test_matmul_reduction_gradients():
    rng = np.random.default_rng(2)
    a, w = t64(rng, 3, 5), t64(rng, 5, 2)

    def objective():
        y = a @ w
        return (y * y).sum(axis=0).mean()

    gradcheck(objective, [a, w])


def test_elementwise_function_gradients():
    rng = np.random.default_rng(3)
    a = Tensor(rng.uniform(0.5, 2.0, (4, 4)), requires_grad=True)

    def objective():
        return (a.exp().log().sqrt() + a.tanh() + a.abs()).sum()

    gradcheck(objective, [a])


def test_relu_max_getitem_gradients():
    rng = np.random.default_rng(4)
    a = t64(rng, 6, 5)

    def objective():
        picked = a[np.arange(6), np.array([0, 1, 2, 3, 4, 0])]
        return a.relu().sum() + a.max(axis=1).sum() + (picked * picked).sum()

    gradcheck(objective, [a])


def test_reshape_transpose_slice_gradients():
    rng = np.random.default_rng(5)
    a = t64(rng, 2, 3, 4)

    def objective():
        b = a.transpose(1, 0, 2).reshape(3, 8)
        return (b[:, 1:] * b[:, :-1]).sum()

    gradcheck(objective, [a])


def test_conv2d_gradients():
    rng = np.random.default_rng(6)
    x = t64(rng, 2, 3, 6, 6)
    w = t64(rng, 4, 3, 3, 3)
    b = t64(rng, 4)

    def objective():
        return (conv2d(x, w, b, stride=1, pad=1) ** 2).sum()

    gradcheck(objective, [x, w, b])


def test_conv2d_stride_gradients():
    rng = np.random.default_rng(7)
    x = t64(rng, 2, 2, 8, 8)
    w = t64(rng, 3, 2, 3, 3)

    def objective():
        return conv2d(x, w, None, stride=2, pad=1).abs().sum()

    gradcheck(objective, [x, w])


def test_avg_pool_gradients():
    rng = np.random.default_rng(8)
    x = t64(rng, 2, 3, 4, 4)

    def objective():
        return (avg_pool2d(x, 2) ** 2).sum()

    gradcheck(objective, [x])


def test_log_softmax_properties_and_gradients():
    rng = np.random.default_rng(9)
    logits = t64(rng, 5, 7)
    lp = log_softmax(logits)
    assert np.all(lp.data <= 0.0)
    assert np.allclose(np.exp(lp.data).sum(axis=1), 1.0, atol=1e-12)
    labels = rng.integers(0, 7, size=5)

    def objective():
        return nll_loss(log_softmax(logits), labels)

    gradcheck(objective, [logits])


def test_kl_divergence_value_and_gradient():
    # hand case: KL((0.9, 0.1) || (0.5, 0.5)) = 0.9 ln 1.8 + 0.1 ln 0.2
    p = np.array([[0.9, 0.1]])
    logq = Tensor(np.log(np.array([[0.5, 0.5]])), requires_grad=True)
    expected = 0.9 * np.log(0.9 / 0.5) + 0.1 * np.log(0.1 / 0.5)
    assert abs(kl_divergence(p, logq).item() - expected) < 1e-12

    rng = np.random.default_rng(10)
    logits = t64(rng, 3, 4)
    p = np.exp(np.log(softmax(Tensor(rng.normal(size=(3, 4)))).data))

    def objective():
        return kl_divergence(p, log_softmax(logits))

    gradcheck(objective, [logits])
    # KL of a distribution with itself is zero
    self_logq = log_softmax(Tensor(rng.normal(size=(2, 5))))
    assert abs(kl_divergence(np.exp(self_logq.data), self_logq).item()) < 1e-12


def test_no_grad_blocks_tape():
    a = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        out = (a * 2.0).sum()
    assert not out.requires_grad
    with pytest.raises(RuntimeError):
        out.backward()


def test_float32_stays_float32():
    a = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    out = ((a * 2.0 + 1.0) / 3.0 - 0.5).mean()
    assert out.data.dtype == np.float32
    out.backward()
    assert a.grad.dtype == np.float32


def test_grad_accumulates_across_backward_calls():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    (a * a).sum().backward()
    first = a.grad.copy()
    (a * a).sum().backward()
    assert np.allclose(a.grad, 2 * first)
