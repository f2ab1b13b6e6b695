import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedmemetic.numerics import (
    DimensionError,
    NonFiniteGradientError,
    OneHotError,
    OptimizerState,
    Tape,
    Var,
    adam_step,
    add,
    avgpool2d,
    concat_forward,
    conv2d_forward,
    dense_forward,
    grad_check,
    relu_forward,
    repeat_vector,
    reshape,
    sgd_step,
    softmax,
    softmax_ce_loss,
)


def central_diff(f, x, h=1e-5):
    """Independent finite-difference gradient of scalar f at float64 x."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    d = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if d == 0 else np.linalg.norm(a - b) / d


# -- dense -----------------------------------------------------------------

def test_dense_worked_example():
    out = dense_forward(Var(np.array([[1.0, 0.0]])), Var(np.array([[2.0, 3.0], [4.0, 5.0]])),
                        Var(np.array([1.0, 1.0])))
    np.testing.assert_array_equal(out.value, [[3.0, 4.0]])


def test_dense_identity():
    x = np.random.default_rng(0).normal(size=(4, 3))
    out = dense_forward(Var(x), Var(np.eye(3)), Var(np.zeros(3)))
    np.testing.assert_array_equal(out.value, x)


def test_dense_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        dense_forward(Var(np.zeros((2, 3))), Var(np.zeros((4, 5))), Var(np.zeros(5)))


def test_dense_backward_closed_form_and_fd():
    rng = np.random.default_rng(1)
    x, W, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3)), rng.normal(size=3)
    G = rng.normal(size=(5, 3))
    tape = Tape()
    xv, Wv, bv = tape.watch("x", x), tape.watch("W", W), tape.watch("b", b)
    out = dense_forward(xv, Wv, bv, tape)
    grads = tape.backward(out, G)
    np.testing.assert_allclose(grads["W"], x.T @ G)
    np.testing.assert_allclose(grads["x"], G @ W.T)
    np.testing.assert_allclose(grads["b"], G.sum(axis=0))
    fd_W = central_diff(lambda w: float((dense_forward(Var(x), Var(w), Var(b)).value * G).sum()), W)
    assert rel_err(grads["W"], fd_W) < 1e-4


# -- relu / concat / repeat ------------------------------------------------

def test_relu_values_and_mask():
    np.testing.assert_array_equal(relu_forward(Var(np.array([-1.0, 0.0, 2.0]))).value, [0, 0, 2])
    x = np.array([0.5, 2.0, 7.0])
    np.testing.assert_array_equal(relu_forward(Var(x)).value, x)
    tape = Tape()
    v = tape.watch("x", np.array([-1.0, 2.0]))
    grads = tape.backward(relu_forward(v, tape), np.array([5.0, 7.0]))
    np.testing.assert_array_equal(grads["x"], [0.0, 7.0])


def test_relu_subgradient_zero_at_zero():
    tape = Tape()
    v = tape.watch("x", np.array([0.0]))
    assert tape.backward(relu_forward(v, tape))["x"][0] == 0.0


def test_concat_forward_backward():
    out = concat_forward(Var(np.array([[1.0, 2.0]])), Var(np.array([[3.0]])))
    np.testing.assert_array_equal(out.value, [[1, 2, 3]])
    a = np.array([[1.0, 2.0]])
    np.testing.assert_array_equal(concat_forward(Var(a), Var(np.zeros((1, 0)))).value, a)
    tape = Tape()
    av, bv = tape.watch("a", a), tape.watch("b", np.array([[3.0]]))
    grads = tape.backward(concat_forward(av, bv, tape), np.ones((1, 3)))
    np.testing.assert_array_equal(grads["a"], [[1, 1]])
    np.testing.assert_array_equal(grads["b"], [[1]])


def test_concat_leading_mismatch():
    with pytest.raises(DimensionError):
        concat_forward(Var(np.zeros((2, 2))), Var(np.zeros((3, 1))))


def test_repeat_vector_shapes_and_grad():
    x = np.arange(6.0).reshape(2, 3)
    out = repeat_vector(Var(x), 4)
    assert out.shape == (2, 4, 3)
    for t in range(4):
        np.testing.assert_array_equal(out.value[:, t, :], x)
    np.testing.assert_array_equal(repeat_vector(Var(x), 1).value[:, 0, :], x)
    tape = Tape()
    v = tape.watch("x", x)
    grads = tape.backward(repeat_vector(v, 4, tape))
    np.testing.assert_array_equal(grads["x"], 4 * np.ones((2, 3)))
    with pytest.raises(ValueError):
        repeat_vector(Var(x), 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_repeat_backward_is_exact_sum(n, r, d, seed):
    rng = np.random.default_rng(seed)
    G = rng.normal(size=(n, r, d))
    tape = Tape()
    v = tape.watch("x", rng.normal(size=(n, d)))
    grads = tape.backward(repeat_vector(v, r, tape), G)
    expect = G[:, 0, :].copy()
    for t in range(1, r):
        expect = expect + G[:, t, :]
    np.testing.assert_array_equal(grads["x"], G.sum(axis=1))
    np.testing.assert_allclose(grads["x"], expect, rtol=0, atol=1e-12)


# -- loss ------------------------------------------------------------------

def test_ce_uniform_logits_gives_log_c():
    for C in (2, 5, 10):
        loss = softmax_ce_loss(Var(np.zeros((3, C))), np.eye(C)[[0, 1, 1]])
        assert math.isclose(float(loss.value), math.log(C), rel_tol=1e-12)


def test_ce_saturated():
    logits = np.zeros((1, 4))
    logits[0, 2] = 30.0
    assert float(softmax_ce_loss(Var(logits), np.eye(4)[[2]]).value) < 1e-9


def test_ce_rejects_non_onehot():
    with pytest.raises(OneHotError):
        softmax_ce_loss(Var(np.zeros((2, 3))), np.array([[1, 0, 0], [1, 1, 0]]))


def test_ce_gradient_is_p_minus_y_over_n():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(6, 4))
    y = np.eye(4)[rng.integers(0, 4, size=6)]
    tape = Tape()
    v = tape.watch("z", z)
    g = tape.backward(softmax_ce_loss(v, y, tape))["z"]
    np.testing.assert_allclose(g, (softmax(z) - y) / 6, atol=1e-15)
    fd = central_diff(lambda zz: float(softmax_ce_loss(Var(zz), y).value), z)
    assert rel_err(g, fd) < 1e-4


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_softmax_rows_sum_to_one_and_loss_nonnegative(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(scale=20, size=(4, 6)).astype(np.float32)
    np.testing.assert_allclose(softmax(z).sum(axis=1), 1.0, atol=1e-6)
    assert float(softmax_ce_loss(Var(z), np.eye(6)[rng.integers(0, 6, 4)]).value) >= 0


# -- every primitive vs finite differences on random inputs ----------------

def _primitive_cases(rng):
    x = rng.normal(size=(3, 4))
    W, b = rng.normal(size=(4, 5)), rng.normal(size=5)
    img = rng.normal(size=(2, 6, 6, 2))
    K, kb = rng.normal(size=(3, 3, 2, 3)), rng.normal(size=3)
    G5 = rng.normal(size=(3, 5))
    y = np.eye(5)[rng.integers(0, 5, 3)]
    return {
        "dense": ({"x": x, "W": W, "b": b},
                  lambda P, t: _dot(dense_forward(P["x"], P["W"], P["b"], t), G5, t)),
        "relu": ({"x": x}, lambda P, t: _dot(relu_forward(P["x"], t), rng_fixed(x.shape), t)),
        "concat": ({"a": x, "b": W[:3]},
                   lambda P, t: _dot(concat_forward(P["a"], P["b"], t), rng_fixed((3, 9)), t)),
        "repeat": ({"x": x}, lambda P, t: _dot(repeat_vector(P["x"], 3, t), rng_fixed((3, 3, 4)), t)),
        "conv": ({"x": img, "K": K, "b": kb},
                 lambda P, t: _dot(conv2d_forward(P["x"], P["K"], P["b"], t), rng_fixed((2, 6, 6, 3)), t)),
        "pool": ({"x": img}, lambda P, t: _dot(avgpool2d(P["x"], t), rng_fixed((2, 3, 3, 2)), t)),
        "softmax_ce": ({"z": G5}, lambda P, t: softmax_ce_loss(P["z"], y, t)),
        "reshape": ({"x": x}, lambda P, t: _dot(reshape(P["x"], (2, 6), t), rng_fixed((2, 6)), t)),
        "add": ({"a": x, "b": G5[:, :4]},
                lambda P, t: _dot(relu_forward(add(P["a"], P["b"], t), t), rng_fixed((3, 4)), t)),
    }


def rng_fixed(shape):
    return np.random.default_rng(99).normal(size=shape)


def _dot(v, G, tape):
    """Scalar <v, G> recorded on the tape (a dense layer with one output)."""
    n = v.value.size
    flat = reshape(v, (1, n), tape)
    return reshape(dense_forward(flat, Var(G.reshape(n, 1), requires_grad=False),
                                 Var(np.zeros(1), requires_grad=False), tape), (), tape)


PRIMITIVES = ["dense", "relu", "concat", "repeat", "conv", "pool", "softmax_ce", "reshape", "add"]


@pytest.mark.parametrize("name", PRIMITIVES)
def test_primitive_grad_check(name):
    worst = 0.0
    for trial in range(100 if name not in ("conv",) else 20):
        params, fn = _primitive_cases(np.random.default_rng(trial))[name]
        worst = max(worst, grad_check(fn, params).max_rel_error)
    assert worst < 1e-4


def test_grad_check_linear_and_constant():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(3, 1))
    x = rng.normal(size=(1, 3))
    linear = lambda P, t: _dot(dense_forward(Var(x, requires_grad=False), P["w"], Var(np.zeros(1)), t),
                               np.ones((1, 1)), t)
    assert grad_check(linear, {"w": w}).max_rel_error < 1e-10

    const = lambda P, t: Var(np.array(3.0))
    rep = grad_check(const, {"w": w})
    assert rep.max_rel_error == 0.0


# -- optimizers --------------------------------------------------------------

def test_sgd_worked_examples():
    p = {"w": np.array(1.0)}
    assert float(sgd_step(p, {"w": np.array(0.5)}, 0.1)["w"]) == pytest.approx(0.95, abs=1e-15)
    assert sgd_step(p, {"w": np.array(0.0)}, 0.1)["w"] == 1.0
    assert sgd_step(p, {"w": np.array(0.5)}, 0.0)["w"] == 1.0


def test_sgd_rejects_non_finite():
    with pytest.raises(NonFiniteGradientError, match="'w'"):
        sgd_step({"w": np.ones(2)}, {"w": np.array([1.0, np.nan])}, 0.1)


def test_adam_first_step_closed_form():
    st_ = OptimizerState("adam", lr=0.001)
    new = adam_step({"p": np.array(0.0)}, {"p": np.array(1.0)}, st_)
    # m_hat = g, v_hat = g^2 -> step = lr * 1 / (1 + eps)
    assert float(new["p"]) == pytest.approx(-0.001 / (1 + 1e-8), rel=1e-12)
    assert st_.step == 1


def test_adam_zero_grad_is_fixed():
    st_ = OptimizerState("adam", lr=0.1)
    p = {"p": np.array([1.5, -2.0])}
    for _ in range(10):
        p = adam_step(p, {"p": np.zeros(2)}, st_)
    np.testing.assert_array_equal(p["p"], [1.5, -2.0])
    assert st_.step == 10


def _scalar_adam_oracle(p, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t in range(1, steps + 1):
        g = 2 * (p - 3)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return p


def test_adam_quadratic_matches_scalar_simulation():
    st_ = OptimizerState("adam", lr=0.1)
    p = {"p": np.array(0.0)}
    for _ in range(200):
        p = adam_step(p, {"p": 2 * (p["p"] - 3)}, st_)
    oracle = _scalar_adam_oracle(0.0, 0.1, 200)
    assert abs(float(p["p"]) - 3) < 0.05
    assert float(p["p"]) == pytest.approx(oracle, abs=1e-12)


def test_optimizers_are_deterministic():
    rng = np.random.default_rng(0)
    params = {"a": rng.normal(size=(3, 3)).astype(np.float32)}
    grads = {"a": rng.normal(size=(3, 3)).astype(np.float32)}
    s1, s2 = OptimizerState(), OptimizerState()
    np.testing.assert_array_equal(adam_step(params, grads, s1)["a"], adam_step(params, grads, s2)["a"])
    np.testing.assert_array_equal(s1.m["a"], s2.m["a"])
    np.testing.assert_array_equal(sgd_step(params, grads, 0.1)["a"], sgd_step(params, grads, 0.1)["a"])


def test_float32_preserved():
    p = {"a": np.ones(3, np.float32)}
    g = {"a": np.full(3, 0.5, np.float32)}
    assert sgd_step(p, g, 0.1)["a"].dtype == np.float32
    assert adam_step(p, g, OptimizerState())["a"].dtype == np.float32


def test_backward_runs_in_reverse_order():
    tape = Tape()
    x = tape.watch("x", np.ones((2, 3)))
    h = relu_forward(x, tape)
    h = repeat_vector(h, 2, tape)
    trace = []
    tape.backward(h, np.ones((2, 2, 3)), trace=trace)
    assert trace == list(reversed(tape.op_names)) == ["repeat_vector", "relu"]
