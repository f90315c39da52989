"""Matrix primitive contracts: shape validation, oracles, gradient checks."""

import numpy as np
import pytest

from fedquad.rng import RngStream
from fedquad.tensor import (
    ShapeError,
    as_matrix,
    gelu,
    gelu_backward,
    layer_norm,
    layer_norm_backward,
    matmul,
    row_sums,
)


def rand_matrix(seed, rows, cols, lo=-2.0, hi=2.0):
    s = RngStream(seed)
    vals = [s.uniform_in(lo, hi) for _ in range(rows * cols)]
    return np.array(vals, dtype=np.float64).reshape(rows, cols)


def test_as_matrix_rejects_bad_rank():
    with pytest.raises(ShapeError):
        as_matrix(np.zeros(3))
    with pytest.raises(ShapeError):
        as_matrix(np.zeros((2, 2, 2)))
    out = as_matrix([[1, 2], [3, 4]])
    assert out.dtype == np.float64
    assert out.flags["C_CONTIGUOUS"]


def test_matmul_identity():
    m = rand_matrix(1, 3, 3)
    assert np.array_equal(matmul(np.eye(3), m), m)


def test_matmul_annihilator():
    m = rand_matrix(2, 3, 4)
    out = matmul(np.zeros((2, 3)), m)
    assert out.shape == (2, 4)
    assert not np.any(out)


def test_matmul_against_triple_loop():
    a = rand_matrix(3, 4, 5)
    b = rand_matrix(4, 5, 3)
    got = matmul(a, b)
    want = np.zeros((4, 3))
    for i in range(4):
        for j in range(3):
            acc = 0.0
            for k in range(5):
                acc += a[i, k] * b[k, j]
            want[i, j] = acc
    assert np.max(np.abs(got - want)) <= 1e-12


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(np.zeros((2, 3)), np.zeros((4, 2)))


def test_matmul_distributes_over_add():
    a = rand_matrix(5, 3, 4)
    b = rand_matrix(6, 4, 2)
    c = rand_matrix(7, 4, 2)
    lhs = matmul(a, b + c)
    rhs = matmul(a, b) + matmul(a, c)
    assert np.max(np.abs(lhs - rhs)) <= 1e-10


def test_matmul_associative():
    a = rand_matrix(8, 2, 3)
    b = rand_matrix(9, 3, 4)
    c = rand_matrix(10, 4, 2)
    lhs = matmul(matmul(a, b), c)
    rhs = matmul(a, matmul(b, c))
    assert np.max(np.abs(lhs - rhs)) <= 1e-10


def test_matmul_deterministic():
    a = rand_matrix(11, 6, 7)
    b = rand_matrix(12, 7, 5)
    assert matmul(a, b).tobytes() == matmul(a, b).tobytes()


def test_gelu_zero_and_asymptote():
    x = np.array([[0.0, 6.0, 8.0, -8.0]])
    y = gelu(x)
    assert y[0, 0] == 0.0
    assert abs(y[0, 1] - 6.0) <= 1e-6
    assert abs(y[0, 2] - 8.0) <= 1e-6
    assert abs(y[0, 3]) <= 1e-6  # large negative saturates to 0


def test_gelu_backward_finite_differences():
    s = RngStream(99)
    xs = np.array([[s.uniform_in(-3.0, 3.0) for _ in range(10)] for _ in range(10)])
    up = np.ones_like(xs)
    grad = gelu_backward(xs, up)
    eps = 1e-6
    num = (gelu(xs + eps) - gelu(xs - eps)) / (2 * eps)
    rel = np.abs(grad - num) / np.maximum(np.abs(num), 1.0)
    assert float(np.max(rel)) <= 1e-6


def test_gelu_backward_scales_with_upstream():
    x = rand_matrix(13, 4, 4)
    up = rand_matrix(14, 4, 4)
    assert np.allclose(gelu_backward(x, up), up * gelu_backward(x, np.ones_like(x)), atol=1e-15)
    with pytest.raises(ShapeError):
        gelu_backward(x, np.ones((2, 2)))


def test_layer_norm_constant_row_gives_bias():
    x = np.full((3, 8), 4.2)
    gain = np.ones(8)
    bias = np.linspace(-1, 1, 8)
    y, mean, invstd = layer_norm(x, gain, bias)
    assert np.max(np.abs(y - bias[None, :])) <= 1e-3
    assert np.allclose(mean, 4.2)


def test_layer_norm_standardizes_rows():
    # spread the rows wide so eps=1e-5 shifts the variance by under 1e-6
    x = rand_matrix(15, 6, 16, lo=-20.0, hi=20.0)
    y, _, _ = layer_norm(x, np.ones(16), np.zeros(16))
    row_mean = y.mean(axis=1)
    row_var = y.var(axis=1)
    assert float(np.max(np.abs(row_mean))) <= 1e-10
    assert np.all(row_var >= 1 - 1e-6)
    assert np.all(row_var <= 1.0)


def test_layer_norm_shape_checks():
    with pytest.raises(ShapeError):
        layer_norm(np.zeros((2, 4)), np.ones(3), np.zeros(4))


def test_layer_norm_backward_finite_differences():
    s = RngStream(7)
    rows, cols = 5, 9
    x = np.array([[s.uniform_in(-2.0, 2.0) for _ in range(cols)] for _ in range(rows)])
    gain = np.array([s.uniform_in(0.5, 1.5) for _ in range(cols)])
    bias = np.array([s.uniform_in(-0.5, 0.5) for _ in range(cols)])
    dy = np.array([[s.uniform_in(-1.0, 1.0) for _ in range(cols)] for _ in range(rows)])

    def loss(xv, gv, bv):
        y, _, _ = layer_norm(xv, gv, bv)
        return float(np.sum(y * dy))

    _, mean, invstd = layer_norm(x, gain, bias)
    dx, dgain, dbias = layer_norm_backward(dy, x, gain, mean, invstd)

    eps = 1e-5
    for idx in [(0, 0), (2, 4), (4, 8), (1, 3)]:
        xp = x.copy()
        xm = x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        num = (loss(xp, gain, bias) - loss(xm, gain, bias)) / (2 * eps)
        assert abs(dx[idx] - num) / max(abs(num), 1.0) <= 1e-5
    for j in [0, 4, 8]:
        gp, gm = gain.copy(), gain.copy()
        gp[j] += eps
        gm[j] -= eps
        num = (loss(x, gp, bias) - loss(x, gm, bias)) / (2 * eps)
        assert abs(dgain[j] - num) / max(abs(num), 1.0) <= 1e-5
        bp, bm = bias.copy(), bias.copy()
        bp[j] += eps
        bm[j] -= eps
        num = (loss(x, gain, bp) - loss(x, gain, bm)) / (2 * eps)
        assert abs(dbias[j] - num) / max(abs(num), 1.0) <= 1e-5


def test_layer_norm_backward_shape_check():
    x = rand_matrix(16, 3, 4)
    _, mean, invstd = layer_norm(x, np.ones(4), np.zeros(4))
    with pytest.raises(ShapeError):
        layer_norm_backward(np.zeros((2, 4)), x, np.ones(4), mean, invstd)


def test_row_sums_matches_manual_sum():
    x = rand_matrix(17, 4, 50)
    got = row_sums(x)
    for i in range(4):
        acc = 0.0
        for v in x[i]:
            acc += float(v)
        assert got[i] == acc
