import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cellsdf.autodiff import GraphError, Tape, check_gradients
from cellsdf.rotations import (
    euler_matrix,
    euler_matrix_derivatives,
    geodesic_distance,
    matrix_to_euler,
    random_rotation,
)

angles_st = st.tuples(*[st.floats(-np.pi, np.pi)] * 3)


# -- rotations -------------------------------------------------------------------


@settings(max_examples=100, deadline=None)
@given(angles_st)
def test_rotation_is_orthogonal(a):
    R = euler_matrix(a)
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.isclose(np.linalg.det(R), 1.0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(angles_st)
def test_euler_derivatives_match_fd(a):
    h = 1e-6
    for k, d in enumerate(euler_matrix_derivatives(a)):
        ap, am = np.array(a, float), np.array(a, float)
        ap[k] += h
        am[k] -= h
        fd = (euler_matrix(ap) - euler_matrix(am)) / (2 * h)
        assert np.allclose(d, fd, atol=1e-8)


@settings(max_examples=100, deadline=None)
@given(angles_st)
def test_matrix_to_euler_roundtrip(a):
    R = euler_matrix(a)
    assert np.allclose(euler_matrix(matrix_to_euler(R)), R, atol=1e-9)


def test_order_and_haar_sampling():
    # R = Rz(gamma) Ry(beta) Rx(alpha): a quarter turn about z maps x to y
    assert np.allclose(euler_matrix((0, 0, np.pi / 2)) @ [1, 0, 0], [0, 1, 0])
    rng = np.random.default_rng(0)
    Rs = [random_rotation(rng) for _ in range(2000)]
    # the mean of Haar-distributed rotations is the zero matrix
    assert np.abs(np.mean(Rs, axis=0)).max() < 0.05
    assert geodesic_distance(Rs[0], Rs[0]) == 0.0
    assert np.isclose(geodesic_distance(np.eye(3), euler_matrix((0, 0, 0.3))), 0.3)


# -- tape operations -----------------------------------------------------------


def test_linear_examples():
    t = Tape()
    out = t.linear(t.input(np.array([[1.0, 2.0]])), t.input(np.eye(2)), t.input(np.zeros(2)))
    assert np.array_equal(out.value, [[1.0, 2.0]])
    out = t.linear(t.input(np.array([[1.0, 1.0]])), t.input(np.array([[2.0, 3.0]])), t.input(np.array([1.0])))
    assert np.array_equal(out.value, [[6.0]])


def test_linear_shape_errors():
    t = Tape()
    with pytest.raises(GraphError):
        t.matmul(t.input(np.ones((2, 3))), t.input(np.ones((4, 2))))
    with pytest.raises(GraphError):
        t.add_bias(t.input(np.ones((2, 3))), t.input(np.ones(2)))
    with pytest.raises(GraphError):
        t.concat([t.input(np.ones((2, 3))), t.input(np.ones((3, 3)))])


def test_linear_weight_gradient_is_replicated_input(rng):
    x = rng.normal(size=(1, 4))

    def build(t, n):
        y = t.linear(t.input(x), n["W"], n["b"])
        return t.l1_mean(y, np.full((1, 3), -20.0))

    # central differences are exact for a linear map, so a wide step only trims round-off
    rep = check_gradients(build, {"W": rng.normal(size=(3, 4)), "b": np.zeros(3)}, h=1e-3)
    assert rep.max_rel_error <= 1e-9
    t = Tape()
    W = t.input(rng.normal(size=(3, 4)), "W", True)
    y = t.linear(t.input(x), W, t.input(np.zeros(3)))
    # the L1 against a far-below target is sum(y)/3, so dL/dW = x / 3 on every row
    t.backward(t.l1_mean(y, np.full((1, 3), -100.0)))
    assert np.allclose(W.grad, np.repeat(x, 3, axis=0) / 3, atol=1e-12)


def test_sine_values():
    t = Tape()
    assert t.sine(t.input(np.zeros((1, 3))), 7.0).value.max() == 0
    assert np.isclose(t.sine(t.input(np.array([[np.pi / 60]])), 30.0).value[0, 0], 1.0)
    with pytest.raises(ValueError):
        t.sine(t.input(np.zeros((1, 1))), 0.0)


def test_sine_gradient(rng):
    def build(t, n):
        return t.l1_mean(t.sine(n["x"], 30.0), np.full((4, 3), -2.0))

    assert check_gradients(build, {"x": rng.normal(size=(4, 3))}).max_rel_error < 1e-6


def test_rotate3_values_and_gradient(rng):
    t = Tape()
    p = t.input(np.array([[1.0, 0.0, 0.0]]))
    assert np.allclose(t.rotate3(p, t.input(np.zeros(3))).value, [[1, 0, 0]])
    assert np.allclose(t.rotate3(p, t.input(np.array([0, 0, np.pi / 2]))).value, [[0, -1, 0]], atol=1e-15)

    target = rng.normal(size=(6, 3)) * 5

    def build(t, n):
        return t.l1_mean(t.rotate3(n["p"], n["a"]), target)

    rep = check_gradients(build, {"p": rng.normal(size=(6, 3)), "a": rng.normal(size=3)})
    assert rep.per_input["a"] < 1e-5 and rep.per_input["p"] < 1e-5


def test_backward_rules():
    t = Tape()
    x = t.input(np.ones((2, 2)), "x", True)
    unused = t.input(np.ones(3), "u", True)
    y = t.l1_mean(x, np.zeros((2, 2)))
    grads = t.backward(y)
    # mean of |x|: each entry contributes 1/4
    assert np.array_equal(grads["x"], np.full((2, 2), 0.25))
    assert np.array_equal(grads["u"], np.zeros(3))
    del unused
    with pytest.raises(ValueError):
        t.backward(x)


def test_l1_subgradient_at_zero_is_zero():
    t = Tape()
    x = t.input(np.array([[0.0], [1.0]]), "x", True)
    t.backward(t.l1_mean(x, np.zeros(2)))
    assert x.grad[0, 0] == 0.0 and x.grad[1, 0] == 0.5


def test_concat_broadcast_gradient(rng):
    z = rng.normal(size=(1, 2))
    x = rng.normal(size=(5, 2))

    def build(t, n):
        h = t.concat([n["x"], n["z"]])
        W = t.input(np.arange(8.0).reshape(2, 4) / 10)
        return t.l1_mean(t.sine(t.matmul(h, W), 2.0), np.zeros(10))

    rep = check_gradients(build, {"x": x, "z": z})
    assert rep.passed


def two_layer(rng):
    return {
        "W0": rng.normal(size=(6, 4)),
        "b0": rng.normal(size=6) * 0.1,
        "W1": rng.normal(size=(1, 6)) * 0.3,
        "b1": np.zeros(1),
    }


def test_two_layer_sine_net(rng):
    x = rng.uniform(-1, 1, size=(16, 4))
    target = rng.normal(size=16)

    def build(t, n):
        h = t.sine(t.linear(t.input(x), n["W0"], n["b0"]), 3.0)
        return t.l1_mean(t.linear(h, n["W1"], n["b1"]), target)

    assert check_gradients(build, two_layer(rng)).max_rel_error <= 1e-5


class DroppedOmegaTape(Tape):
    """Sine backward that forgets the omega0 factor."""

    def sine(self, x, omega0):
        node = super().sine(x, omega0)
        if node._backward is not None:

            def backward(n):
                x._accumulate(n.grad * np.cos(omega0 * x.value))

            node._backward = backward
        return node


def test_corrupted_sine_backward_is_caught(rng):
    x = rng.uniform(-1, 1, size=(16, 4))
    target = rng.normal(size=16)
    omega0 = 30.0

    def build(t, n):
        h = t.sine(t.linear(t.input(x), n["W0"], n["b0"]), omega0)
        return t.l1_mean(t.linear(h, n["W1"], n["b1"]), target)

    rep = check_gradients(build, two_layer(rng), tape_factory=DroppedOmegaTape)
    assert not rep.passed
    assert abs(rep.per_input["W0"] - (1 - 1 / omega0)) < 0.01
    assert rep.per_input["W1"] < 1e-5


def test_determinism(rng):
    vals = {"W0": rng.normal(size=(6, 4)), "b0": np.zeros(6)}
    x = rng.normal(size=(8, 4))

    def run():
        t = Tape()
        n = {k: t.input(v, k, True) for k, v in vals.items()}
        loss = t.l1_mean(t.sine(t.linear(t.input(x), n["W0"], n["b0"]), 30.0), np.zeros((8, 6)))
        g = t.backward(loss)
        return loss.value.copy(), g

    (l1, g1), (l2, g2) = run(), run()
    assert np.array_equal(l1, l2)
    assert all(np.array_equal(g1[k], g2[k]) for k in g1)


def test_non_recording_tape_keeps_no_nodes():
    t = Tape(record=False)
    x = t.input(np.ones((3, 2)))
    y = t.sine(x, 2.0)
    assert y.value.shape == (3, 2)
    assert len(t.nodes) == 1
