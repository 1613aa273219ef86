"""Optimizer: update formula, determinism, clipping."""

import numpy as np
import pytest

from steerlab import nn, optim, tensor as T


def setup_function(_):
    T.clear_graph()


def test_zero_gradient_leaves_params_unchanged():
    p = T.parameter(np.array([1.0, -2.0]))
    p.grad = np.zeros(2)
    opt = optim.Adam([p], lr=0.1)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert p.grad is None


def test_single_step_matches_hand_evaluation():
    # g=1, lr=0.1: mhat=1, vhat=1 after bias correction, so the step is
    # lr * 1 / (1 + eps) which is 0.1 up to eps
    p = T.parameter(np.array([0.5]))
    p.grad = np.ones(1)
    opt = optim.Adam([p], lr=0.1, eps=1e-8)
    opt.step()
    expected = 0.5 - 0.1 * 1.0 / (1.0 + 1e-8)
    np.testing.assert_allclose(p.data, [expected], rtol=0, atol=1e-15)
    assert abs(p.data[0] - 0.4) < 1e-8


def test_missing_gradient_raises():
    p = T.parameter(np.ones(2))
    opt = optim.Adam([p])
    with pytest.raises(optim.OptimError):
        opt.step()


def test_quadratic_converges_to_minimum():
    # f(p) = sum((p - c)^2), minimum at c
    c = np.array([1.5, -0.75, 3.0])
    p = T.parameter(np.zeros(3))
    opt = optim.Adam([p], lr=0.01)
    for _ in range(5000):
        T.clear_graph()
        diff = T.sub(p, T.tensor(c))
        T.backward(T.sum_(T.mul(diff, diff)))
        opt.step()
        if np.abs(p.data - c).max() < 1e-3:
            break
    assert np.abs(p.data - c).max() < 1e-3


def test_determinism_bit_identical_updates():
    def train_once():
        rng = np.random.default_rng(123)
        lin = nn.Linear(rng, 4, 3)
        opt = optim.Adam(lin.parameters(), lr=1e-3)
        data = np.random.default_rng(7).normal(size=(10, 6, 4))
        for step in range(10):
            T.clear_graph()
            out = lin(T.tensor(data[step]))
            T.backward(T.sum_(T.mul(out, out)))
            optim.clip_grad_global_norm(lin.parameters(), 0.5)
            opt.step()
        return [p.data.copy() for p in lin.parameters()]

    a = train_once()
    b = train_once()
    for x, y in zip(a, b):
        assert np.array_equal(x, y)


def test_clip_global_norm():
    p1 = T.parameter(np.zeros(3))
    p2 = T.parameter(np.zeros(2))
    p1.grad = np.array([3.0, 0.0, 0.0])
    p2.grad = np.array([0.0, 4.0])
    norm = optim.clip_grad_global_norm([p1, p2], 0.5)
    assert norm == pytest.approx(5.0)
    clipped = np.sqrt((p1.grad**2).sum() + (p2.grad**2).sum())
    assert clipped == pytest.approx(0.5)
    # below the threshold gradients are untouched
    p1.grad = np.array([0.1, 0.0, 0.0])
    p2.grad = np.array([0.0, 0.0])
    norm = optim.clip_grad_global_norm([p1, p2], 0.5)
    assert norm == pytest.approx(0.1)
    np.testing.assert_array_equal(p1.grad, [0.1, 0.0, 0.0])
