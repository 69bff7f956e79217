import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ctan.optim import SGD, MissingGradientError, sgd_step
from ctan.tensor import Tensor


def param(value, grad=None):
    p = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)
    p.grad = None if grad is None else np.asarray(grad, dtype=np.float64)
    return p


def test_plain_descent():
    p = param([1.0, -2.0], grad=[0.5, 0.25])
    sgd_step({"p": p}, lr=0.1)
    np.testing.assert_allclose(p.data, [0.95, -2.025])
    assert p.grad is None


def test_velocity_decay_with_zero_gradient():
    p = param([3.0], grad=[0.0])
    velocity = {"p": np.array([1.0])}
    sgd_step({"p": p}, lr=0.1, momentum=0.9, velocity=velocity)
    assert p.data[0] == pytest.approx(3.0 - 0.1 * 0.9)


def test_two_steps_constant_gradient_match_hand_unrolling():
    g, lr = 2.0, 0.05
    p = param([0.0])
    opt = SGD({"p": p}, lr, momentum=0.9)
    for _ in range(2):
        p.grad = np.array([g])
        opt.step()
    # v1 = g, v2 = 0.9 g + g
    assert p.data[0] == pytest.approx(-lr * g * (1 + 1.9), abs=1e-12)


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0, 0.99), st.floats(0, 1e-2), st.integers(1, 6))
def test_matches_scalar_recursion(p0, g, momentum, wd, steps):
    p = param([p0])
    opt = SGD({"p": p}, 0.01, momentum, wd)
    ref, v = p0, 0.0
    for _ in range(steps):
        p.grad = np.array([g])
        opt.step()
        v = momentum * v + (g + wd * ref)
        ref -= 0.01 * v
    assert p.data[0] == pytest.approx(ref, rel=1e-9, abs=1e-12)


def test_missing_gradient_is_an_error():
    with pytest.raises(MissingGradientError):
        SGD({"a": param([1.0], [1.0]), "b": param([1.0])}, 0.1).step()


def test_frozen_parameters_are_untouched_but_cleared():
    a, b = param([1.0], [1.0]), param([1.0], [1.0])
    SGD({"a": a, "b": b}, 0.1).step(frozen={"b"})
    assert a.data[0] == pytest.approx(0.9) and b.data[0] == 1.0
    assert a.grad is None and b.grad is None


def test_global_norm_clipping():
    a, b = param([0.0], [3.0]), param([0.0], [4.0])
    norm = SGD({"a": a, "b": b}, 1.0).step(max_grad_norm=1.0)
    assert norm == pytest.approx(5.0)
    np.testing.assert_allclose([a.data[0], b.data[0]], [-0.6, -0.8])


def test_learning_rate_scales():
    a, b = param([0.0], [1.0]), param([0.0], [1.0])
    SGD({"a": a, "b": b}, 0.1, lr_scales={"b": 3.0}).step()
    assert a.data[0] == pytest.approx(-0.1) and b.data[0] == pytest.approx(-0.3)


@pytest.mark.parametrize("kwargs", [{"lr": 0.0}, {"lr": -1.0}, {"lr": 0.1, "lr_scales": {"a": 0.0}}])
def test_invalid_settings(kwargs):
    with pytest.raises(ValueError):
        SGD({"a": param([0.0])}, **kwargs)


def test_float32_parameters_stay_float32():
    p = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    p.grad = np.ones(3, dtype=np.float32)
    SGD({"p": p}, 0.1, 0.9, 5e-4).step()
    assert p.data.dtype == np.float32
