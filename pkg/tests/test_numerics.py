import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from termprobe import numerics as nx


def triple_loop(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = [[0.0] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            out[i][j] = math.fsum(float(a[i, t]) * float(b[t, j]) for t in range(k))
    return np.array(out)


def mp_softmax(row, mask):
    mpmath.mp.dps = 40
    ex = [mpmath.e ** mpmath.mpf(float(x)) if m else mpmath.mpf(0) for x, m in zip(row, mask)]
    tot = mpmath.fsum(ex)
    return np.array([float(e / tot) for e in ex])


def test_matmul_identity_and_scalar():
    np.testing.assert_array_equal(nx.matmul(np.eye(2), np.array([[3.0, 4], [5, 6]])), [[3, 4], [5, 6]])
    assert nx.matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]]))[0, 0] == 11.0


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a = rng.uniform(-10, 10, (3, 4)).astype(np.float32)
    b = rng.uniform(-10, 10, (4, 2)).astype(np.float32)
    out = nx.matmul(a, b)
    assert out.dtype == np.float32
    # float32 output: compare relative to the result scale
    np.testing.assert_allclose(out, triple_loop(a, b), rtol=1e-6, atol=1e-5)
    np.testing.assert_allclose(nx.matmul(a.astype(np.float64), b.astype(np.float64)), triple_loop(a, b), atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31))
def test_matmul_property(n, k, m, seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-10, 10, (n, k))
    b = rng.uniform(-10, 10, (k, m))
    np.testing.assert_allclose(nx.matmul(a, b), triple_loop(a, b), atol=1e-6)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(nx.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        nx.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_backward_against_finite_differences():
    rng = np.random.default_rng(1)
    a, b, g = rng.standard_normal((3, 4)), rng.standard_normal((4, 2)), rng.standard_normal((3, 2))
    da, db = nx.matmul_backward(a, b, g)
    err = nx.finite_diff_check(lambda: float((nx.matmul(a, b) * g).sum()), {"a": a, "b": b}, {"a": da, "b": db})
    assert err < 1e-8


def test_softmax_uniform_and_masked():
    np.testing.assert_allclose(nx.masked_softmax_rows(np.zeros((1, 3)), [1, 1, 1]), [[1 / 3] * 3])
    out = nx.masked_softmax_rows(np.array([[5.0, 2.0, 9.0]]), [1, 0, 1])
    assert out[0, 1] == 0.0
    np.testing.assert_allclose(out[0, [0, 2]], mp_softmax([5.0, 9.0], [1, 1]), rtol=1e-12)


def test_softmax_extended_precision():
    out = nx.masked_softmax_rows(np.array([[1.0, 2.0, 3.0]]), [1, 1, 1])
    np.testing.assert_allclose(out[0], mp_softmax([1.0, 2.0, 3.0], [1, 1, 1]), rtol=1e-14)
    out32 = nx.masked_softmax_rows(np.array([[1.0, 2.0, 3.0]], np.float32), [1, 1, 1])
    np.testing.assert_allclose(out32[0], mp_softmax([1.0, 2.0, 3.0], [1, 1, 1]), rtol=1e-6)


def test_softmax_large_scores_stay_finite():
    out = nx.masked_softmax_rows(np.array([[1000.0, 999.0, -1000.0]]), [1, 1, 1])
    assert np.isfinite(out).all()
    np.testing.assert_allclose(out[0], mp_softmax([1000.0, 999.0, -1000.0], [1, 1, 1]), rtol=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 5), st.integers(1, 7)),
              elements=st.floats(-30, 30, width=32)), st.data())
def test_softmax_rows_normalised(scores, data):
    mask = np.array(data.draw(st.lists(st.booleans(), min_size=scores.shape[1], max_size=scores.shape[1])))
    if not mask.any():
        mask[0] = True
    out = nx.masked_softmax_rows(scores, mask)
    np.testing.assert_allclose(out.sum(axis=1, dtype=np.float64), 1.0, atol=1e-6)
    assert (out[:, ~mask] == 0).all()
    assert (out >= 0).all()


def test_softmax_errors():
    with pytest.raises(nx.DegenerateMaskError):
        nx.masked_softmax_rows(np.zeros((2, 3)), [0, 0, 0])
    with pytest.raises(nx.DimensionError):
        nx.masked_softmax_rows(np.zeros((2, 3)), [1, 1])


def test_softmax_backward_finite_differences():
    rng = np.random.default_rng(2)
    s = rng.standard_normal((3, 5))
    mask = np.array([1, 1, 0, 1, 0], bool)
    g = rng.standard_normal((3, 5))
    p = nx.masked_softmax_rows(s, mask)
    ds = nx.softmax_backward(p, g)
    assert (ds[:, ~mask] == 0).all()
    err = nx.finite_diff_check(lambda: float((nx.masked_softmax_rows(s, mask) * g).sum()), {"s": s}, {"s": ds})
    assert err < 1e-8


def test_sigmoid_values():
    assert nx.sigmoid(0.0) == 0.5
    assert abs(nx.sigmoid(50.0) - 1.0) < 1e-9
    mpmath.mp.dps = 30
    assert abs(nx.sigmoid(1.0) - float(1 / (1 + mpmath.e ** -1))) < 1e-15
    assert nx.sigmoid(-800.0) == 0.0 and nx.sigmoid(800.0) == 1.0
    xs = np.linspace(-40, 40, 401)
    assert (np.diff(nx.sigmoid(xs)) >= 0).all()


def test_dropout_mask_is_inverted_and_seeded():
    m = nx.dropout_mask((200, 200), 0.1, np.random.default_rng(0))
    assert set(np.unique(m)) == {0.0, np.float32(1 / 0.9)}
    assert abs(m.mean() - 1.0) < 0.01
    np.testing.assert_array_equal(m, nx.dropout_mask((200, 200), 0.1, np.random.default_rng(0)))
    assert (nx.dropout_mask((3, 3), 0.0, np.random.default_rng(0)) == 1).all()


def test_finite_diff_check_contract():
    x = np.array([1.0, -2.0, 0.5])
    assert nx.finite_diff_check(lambda: float((x ** 2).sum()), {"x": x}, {"x": 2 * x}) < 1e-9
    assert nx.finite_diff_check(lambda: float((x ** 2).sum()), {"x": x}, {"x": 3 * x}) > 0.1
    with pytest.raises(ValueError):
        nx.finite_diff_check(lambda: 0.0, {"x": x}, {"x": x}, eps=1e-2)
    with pytest.raises(nx.NumericError):
        nx.finite_diff_check(lambda: float("nan"), {"x": x}, {"x": x})
