import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from layer_ensembles.nn import (
    DenseWeights,
    DimensionError,
    LayerKind,
    arch_from_sizes,
    as_tensor,
    dense_backward,
    dense_forward,
    init_dense,
    mse_loss,
    sgd_step,
)


def test_as_tensor_rejects_nan_and_bad_shape():
    with pytest.raises(ValueError):
        as_tensor([1.0, np.nan])
    with pytest.raises(DimensionError):
        as_tensor([[1.0, 2.0]], shape=(2, 1))
    assert as_tensor([[1, 2]]).dtype == np.float64


def test_weights_consistency_checked():
    with pytest.raises(DimensionError):
        DenseWeights(np.eye(2), np.zeros(3))
    with pytest.raises(ValueError):
        LayerKind(0, 2)


def test_forward_identity():
    w = DenseWeights(np.eye(2), np.zeros(2))
    np.testing.assert_array_equal(dense_forward(w, np.array([[1.0, 2.0]])), [[1, 2]])


def test_forward_relu_clamps():
    w = DenseWeights(np.eye(2), np.zeros(2))
    np.testing.assert_array_equal(dense_forward(w, np.array([[-1.0, 2.0]]), relu=True), [[0, 2]])


def test_forward_hand_matmul():
    w = DenseWeights([[1, 1], [1, -1]], [0.5, 0])
    np.testing.assert_array_equal(dense_forward(w, np.array([[2.0, 3.0]])), [[5.5, -1]])


def test_forward_shape_mismatch():
    w = DenseWeights(np.eye(2), np.zeros(2))
    with pytest.raises(DimensionError):
        dense_forward(w, np.ones((1, 3)))


def test_backward_scalar():
    w = DenseWeights([[2.0]], [0.0])
    gW, gb, gx = dense_backward(w, np.array([[3.0]]), np.array([[1.0]]))
    assert gW.tolist() == [[3.0]] and gb.tolist() == [1.0] and gx.tolist() == [[2.0]]


def test_backward_relu_dead_zone():
    w = DenseWeights([[1.0]], [0.0])
    gW, gb, gx = dense_backward(w, np.array([[-1.0]]), np.array([[5.0]]), relu=True)
    assert gW.tolist() == [[0.0]] and gb.tolist() == [0.0] and gx.tolist() == [[0.0]]


def _fd_layer(w, x, gout, relu, h=1e-5):
    def f(W, b, xx):
        return float(np.sum(dense_forward(DenseWeights(W, b), xx, relu) * gout))

    num = []
    for arr_idx, base in enumerate((w.W, w.b, x)):
        g = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            args = [w.W.copy(), w.b.copy(), x.copy()]
            args[arr_idx][idx] += h
            up = f(*args)
            args[arr_idx][idx] -= 2 * h
            g[idx] = (up - f(*args)) / (2 * h)
        num.append(g)
    return num


@pytest.mark.parametrize("relu", [False, True])
def test_backward_matches_finite_differences(relu):
    rng = np.random.default_rng(3)
    w = DenseWeights(rng.normal(size=(4, 3)), rng.normal(size=4))
    x = rng.normal(size=(5, 3))
    gout = rng.normal(size=(5, 4))
    analytic = dense_backward(w, x, gout, relu)
    for a, n in zip(analytic, _fd_layer(w, x, gout, relu)):
        np.testing.assert_allclose(a, n, rtol=1e-5, atol=1e-8)


def test_mse_examples():
    loss, g = mse_loss(np.array([[1.0]]), np.array([[1.0]]))
    assert loss == 0 and g.tolist() == [[0.0]]
    loss, g = mse_loss(np.array([[1.0]]), np.array([[0.0]]))
    assert loss == 1 and g.tolist() == [[2.0]]
    loss, g = mse_loss(np.array([[1.0], [3.0]]), np.array([[0.0], [1.0]]))
    assert loss == 2.5 and g.tolist() == [[1.0], [2.0]]
    with pytest.raises(DimensionError):
        mse_loss(np.zeros((2, 1)), np.zeros((3, 1)))


def test_sgd_examples():
    assert sgd_step([np.array(1.0)], [np.array(0.0)], 0.1)[0] == 1.0
    assert sgd_step([np.array(1.0)], [np.array(1.0)], 0.1)[0] == pytest.approx(0.9)
    p = np.array(1.0)
    for _ in range(50):
        (p,) = sgd_step([p], [2 * p], 0.1)
    assert abs(p) < 1e-4
    assert p == pytest.approx(0.8 ** 50, rel=1e-12)


def test_init_scales():
    rng = np.random.default_rng(0)
    w = init_dense(LayerKind(400, 300, relu=True), rng)
    assert np.std(w.W) == pytest.approx(np.sqrt(2 / 400), rel=0.02)
    w = init_dense(LayerKind(400, 300), rng)
    assert np.std(w.W) == pytest.approx(np.sqrt(2 / 700), rel=0.02)
    assert not w.b.any()


def test_arch_from_sizes():
    arch = arch_from_sizes([3, 8, 8, 1])
    assert [k.relu for k in arch] == [True, True, False]
    assert [(k.in_dim, k.out_dim) for k in arch] == [(3, 8), (8, 8), (8, 1)]


def test_forward_deterministic(rng):
    w = DenseWeights(rng.normal(size=(6, 5)), rng.normal(size=6))
    x = rng.normal(size=(9, 5))
    assert dense_forward(w, x, True).tobytes() == dense_forward(w, x, True).tobytes()


@settings(max_examples=50, deadline=None)
@given(a=st.floats(-1e3, 1e3, allow_nan=False), seed=st.integers(0, 2**16))
def test_linearity_without_bias(a, seed):
    rng = np.random.default_rng(seed)
    w = DenseWeights(rng.normal(size=(3, 4)), np.zeros(3))
    x = rng.normal(size=(2, 4))
    lhs = dense_forward(w, a * x)
    rhs = a * dense_forward(w, x)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12 * max(1.0, abs(a)))
