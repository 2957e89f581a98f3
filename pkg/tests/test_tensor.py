import math
import threading

import numpy as np
import pytest

from ddpred import tensor as T
from ddpred.selfcheck import gradient_errors


def leaf(v):
    return T.Tensor(np.asarray(v, dtype=float), requires_grad=True)


def test_matmul_identity(rng):
    A = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(T.matmul(np.eye(3), A).value, A)


def test_analytic_values():
    assert T.tanh(np.zeros((1, 1))).value[0, 0] == 0.0
    assert T.softplus(np.zeros((1, 1))).value[0, 0] == pytest.approx(math.log(2.0), abs=1e-15)
    assert T.sum_squares(np.array([3.0, 4.0])).value == 25.0


def test_softplus_large_inputs():
    v = T.softplus(np.array([[-800.0, 0.0, 800.0]])).value
    assert np.all(np.isfinite(v)) and v[0, 2] == 800.0 and v[0, 0] >= 0.0


def test_grad_sum_squares():
    w = leaf([1.0, 2.0])
    T.backward(T.sum_squares(w))
    np.testing.assert_array_equal(w.grad, [2.0, 4.0])


def test_grad_tanh_at_zero():
    w = leaf([[0.0]])
    c = 2.5
    T.backward(T.total(T.scale(T.tanh(w), c)))
    assert w.grad[0, 0] == c


def test_broadcast_row_bias_grad(rng):
    x, b = leaf(rng.standard_normal((5, 3))), leaf(np.zeros((1, 3)))
    T.backward(T.total(T.add(x, b)))
    np.testing.assert_array_equal(b.grad, np.full((1, 3), 5.0))


def test_shape_errors():
    with pytest.raises(T.ShapeError):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(T.ShapeError):
        T.add(np.ones((2, 3)), np.ones((3, 2)))
    with pytest.raises(T.ShapeError):
        T.concat(np.ones((2, 3)), np.ones((3, 3)))
    with pytest.raises(T.ShapeError):
        T.backward(leaf(np.ones(3)))


def test_non_finite_is_numeric_failure():
    with pytest.raises(T.NumericFailure):
        T.exp(np.array([[1000.0]]))
    with pytest.raises(T.NumericFailure):
        T.log(np.array([[0.0]]))
    T.clear_tape()


def test_tape_cleared_and_linear():
    w = leaf(np.ones((2, 2)))
    y = w
    for _ in range(7):
        y = T.tanh(y)
    assert T.tape_length() == 7
    T.backward(T.total(y))
    assert T.tape_length() == 0


def test_no_grad_records_nothing():
    w = leaf(np.ones((2, 2)))
    with T.no_grad():
        T.tanh(T.matmul(w, w))
    assert T.tape_length() == 0


def test_tapes_are_per_thread():
    w = leaf(np.ones((2, 2)))
    T.tanh(w)
    seen = []
    t = threading.Thread(target=lambda: seen.append(T.tape_length()))
    t.start()
    t.join()
    assert seen == [0] and T.tape_length() == 1
    T.clear_tape()


def test_two_layer_network_gradcheck(rng):
    params = T.ParameterSet()
    params.add("W1", rng.standard_normal((16, 8)) * 0.3)
    params.add("b1", rng.standard_normal((1, 8)) * 0.1)
    params.add("W2", rng.standard_normal((8, 3)) * 0.3)
    x = rng.standard_normal((4, 16))

    def loss():
        h = T.tanh(T.add(T.matmul(x, params["W1"]), params["b1"]))
        out = T.softplus(T.matmul(h, params["W2"]))
        return T.add(T.sum_squares(out), T.total(T.exp(T.scale(out, 0.1))))

    worst, where = gradient_errors(params, loss)
    assert worst < 1e-4, where


def test_every_primitive_gradcheck(rng):
    params = T.ParameterSet()
    params.add("a", rng.uniform(0.5, 1.5, (3, 4)))
    params.add("b", rng.uniform(0.5, 1.5, (3, 4)))
    params.add("col", rng.uniform(0.5, 1.5, (3, 1)))

    def loss():
        a, b, col = params["a"], params["b"], params["col"]
        y = T.div(T.mul(a, b), T.add(b, col))
        y = T.sub(y, T.log(T.add(T.square(a), 1.0)))
        y = T.concat(T.clamp(y, -0.4, 10.0), T.columns(a, 1, 3))
        return T.add(T.mean(T.sum_rows(y)), T.sum_squares(T.scale(y, 0.5)))

    worst, where = gradient_errors(params, loss)
    assert worst < 1e-4, where


# -- parameters and Adam ----------------------------------------------------

def make_params():
    p = T.ParameterSet()
    p.add("w", np.array([[1.0, -2.0]]))
    p.add("s", np.array([0.5]))
    return p


def test_parameterset_views():
    p = make_params()
    assert p.count() == 3 and p.names() == ["w", "s"]
    p.flat[0] = 7.0
    assert p["w"].value[0, 0] == 7.0
    with pytest.raises(KeyError):
        p.add("w", np.zeros(1))


def test_adam_zero_gradient_unchanged():
    p = make_params()
    T.adam_step(p, {"w": np.zeros((1, 2)), "s": np.zeros(1)})
    np.testing.assert_array_equal(p.flat, [1.0, -2.0, 0.5])
    assert p.step == 1


def test_adam_first_step_magnitude():
    p = T.ParameterSet()
    p.add("w", np.array([0.0]))
    T.adam_step(p, {"w": np.array([1.0])}, lr=1e-3)
    # m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
    assert p["w"].value[0] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)


def test_adam_deterministic():
    a, b = make_params(), make_params()
    g = {"w": np.array([[0.3, -0.1]]), "s": np.array([2.0])}
    for _ in range(3):
        T.adam_step(a, g)
        T.adam_step(b, g)
    np.testing.assert_array_equal(a.flat, b.flat)
    np.testing.assert_array_equal(a.m, b.m)


def test_adam_rejects_non_finite():
    p = make_params()
    with pytest.raises(T.NumericFailure):
        T.adam_step(p, {"w": np.array([[np.nan, 0.0]]), "s": np.zeros(1)})
    np.testing.assert_array_equal(p.flat, [1.0, -2.0, 0.5])
    with pytest.raises(T.ShapeError):
        T.adam_step(p, {"w": np.zeros(3)})


def test_copy_is_independent():
    p = make_params()
    q = p.copy()
    q.flat[:] = 0
    assert p["w"].value[0, 1] == -2.0 and q["w"].value[0, 1] == 0.0
