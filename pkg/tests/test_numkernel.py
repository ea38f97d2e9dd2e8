import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from crossrec.numkernel import (
    NonFiniteGradientError,
    activation,
    affine_forward,
    dropout_mask,
    mlp_backward,
    mlp_forward,
    rmsprop_step,
)

from conftest import central_differences, max_relative_error


def test_affine_identity():
    out = affine_forward([1.0, 2.0], np.eye(2), [0.0, 0.0], "identity")
    np.testing.assert_array_equal(out, [1.0, 2.0])


def test_affine_arithmetic():
    out = affine_forward([1.0, 2.0], [[1.0, 1.0], [0.0, 1.0]], [1.0, 0.0], "identity")
    np.testing.assert_array_equal(out, [4.0, 2.0])


def test_affine_sigmoid_at_zero():
    W = np.random.default_rng(0).normal(size=(2, 2))
    np.testing.assert_array_equal(affine_forward([0.0, 0.0], W, [0.0, 0.0], "sigmoid"), [0.5, 0.5])


def test_affine_shape_error():
    with pytest.raises(ValueError):
        affine_forward([1.0, 2.0, 3.0], np.eye(2), [0.0, 0.0])


@pytest.mark.parametrize(
    "z, act, expected",
    [(0.0, "sigmoid", 0.5), (math.log(3), "sigmoid", 0.75), (0.0, "tanh", 0.0), (-1.7, "identity", -1.7)],
)
def test_activation_values(z, act, expected):
    assert activation(z, act) == pytest.approx(expected, abs=1e-15)


@given(st.floats(-700, 700))
def test_activation_ranges(z):
    s = activation(z, "sigmoid")
    assert 0.0 <= s <= 1.0
    assert -1.0 <= activation(z, "tanh") <= 1.0


def test_dropout_degenerate_rates(caplog):
    rng = np.random.default_rng(0)
    np.testing.assert_array_equal(dropout_mask(7, 0.0, rng), np.ones(7))
    np.testing.assert_array_equal(dropout_mask(7, 1.0, rng), np.zeros(7))
    assert "dropout rate 1.0" in caplog.text


def test_dropout_expectation():
    rng = np.random.default_rng(42)
    mask = dropout_mask(100_000, 0.5, rng)
    assert set(np.unique(mask)) == {0.0, 2.0}
    # within 1% and within 3 standard errors of the mean
    assert abs(mask.mean() - 1.0) < 0.01
    assert abs(mask.mean() - 1.0) < 3 * mask.std() / math.sqrt(mask.size)


def test_dropout_rejects_bad_rate():
    with pytest.raises(ValueError):
        dropout_mask(3, 1.5, np.random.default_rng(0))


def test_rmsprop_zero_grad_decays_accumulator():
    p = np.array([1.0, -2.0])
    acc = np.array([0.4, 0.1])
    rmsprop_step(p, np.zeros(2), acc, lr=0.1, rho=0.9, eps=1e-8)
    np.testing.assert_array_equal(p, [1.0, -2.0])
    np.testing.assert_allclose(acc, [0.36, 0.09], rtol=1e-15)


def test_rmsprop_single_step_value():
    p = np.array([0.0])
    acc = np.zeros(1)
    rmsprop_step(p, np.ones(1), acc, lr=0.1, rho=0.9, eps=0.0)
    assert p[0] == pytest.approx(-0.316227766016838, abs=1e-12)


def test_rmsprop_two_steps_closed_form():
    rho, g = 0.9, 1.7
    p, acc = np.zeros(1), np.zeros(1)
    for _ in range(2):
        rmsprop_step(p, np.array([g]), acc, lr=0.01, rho=rho)
    assert acc[0] == pytest.approx((1 - rho**2) * g * g, rel=1e-14)


def test_rmsprop_rejects_nonfinite():
    with pytest.raises(NonFiniteGradientError):
        rmsprop_step(np.zeros(2), np.array([1.0, np.nan]), np.zeros(2), lr=0.1)


@settings(max_examples=50)
@given(arrays(np.float64, 5, elements=st.floats(-1e3, 1e3)), arrays(np.float64, 5, elements=st.floats(0, 1e3)))
def test_rmsprop_zero_grad_never_moves(param, acc):
    before = param.copy()
    rmsprop_step(param, np.zeros(5), acc.copy(), lr=0.3, eps=0.0)
    np.testing.assert_array_equal(param, before)


def test_mlp_backward_matches_differences():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(4, 5))
    Ws = [rng.normal(size=(6, 5)), rng.normal(size=(3, 6))]
    bs = [rng.normal(size=6), rng.normal(size=3)]
    masks = [dropout_mask((4, 6), 0.3, rng), None]
    target = rng.normal(size=(4, 3))

    def f():
        out, _ = mlp_forward(X, Ws, bs, ["tanh", "sigmoid"], masks, out_scale=5.0)
        return float(np.sum((out - target) ** 2))

    out, cache = mlp_forward(X, Ws, bs, ["tanh", "sigmoid"], masks, out_scale=5.0)
    gx, gW, gb = mlp_backward(2 * (out - target), cache)
    params = {"X": X, "W0": Ws[0], "W1": Ws[1], "b0": bs[0], "b1": bs[1]}
    analytic = {"X": gx, "W0": gW[0], "W1": gW[1], "b0": gb[0], "b1": gb[1]}
    assert max_relative_error(analytic, central_differences(f, params)) < 1e-6


def test_forward_is_deterministic():
    rng = np.random.default_rng(0)
    X, W, b = rng.normal(size=(3, 4)), rng.normal(size=(2, 4)), rng.normal(size=2)
    np.testing.assert_array_equal(affine_forward(X, W, b, "sigmoid"), affine_forward(X, W, b, "sigmoid"))


def test_half_squared_norm_gradient_is_identity():
    x = np.array([0.3, -1.2, 2.0])
    num = central_differences(lambda: 0.5 * float(x @ x), {"x": x})
    np.testing.assert_allclose(num["x"], x, atol=1e-9)
    const = central_differences(lambda: 4.2, {"x": x})
    np.testing.assert_array_equal(const["x"], 0.0)
