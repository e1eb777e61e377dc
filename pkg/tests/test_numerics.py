import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from danli import numerics as nx
from danli.errors import MaskError, NumericError, ShapeError

from conftest import numeric_vjp, rel_err


def m(rows):
    return nx.as_matrix(rows)


# --- affine ----------------------------------------------------------------


@pytest.mark.parametrize(
    "x, W, b, expected",
    [
        ([[1, 2]], [[1, 0], [0, 1]], [0, 0], [[1, 2]]),
        ([[1, 2]], [[0, 0], [0, 0]], [3, 4], [[3, 4]]),
        ([[1, 1]], [[2, 3], [4, 5]], [1, 1], [[7, 9]]),
    ],
)
def test_affine_examples(x, W, b, expected):
    np.testing.assert_array_equal(nx.affine(m(x), m(W), m(b)), m(expected))


def test_affine_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(1, 3\).*\(2, 2\)"):
        nx.affine(np.ones((1, 3)), np.ones((2, 2)), np.ones((1, 2)))


# --- relu ------------------------------------------------------------------


def test_relu_examples():
    np.testing.assert_array_equal(nx.relu(m([-1, 0, 2])), m([0, 0, 2]))
    x = m([0.5, 3.0])
    np.testing.assert_array_equal(nx.relu(x), x)
    np.testing.assert_array_equal(nx.relu_backward(m([5, 5]), m([-1, 2])), m([0, 5]))


def test_relu_subgradient_at_zero_is_zero():
    np.testing.assert_array_equal(nx.relu_backward(m([7.0]), m([0.0])), m([0.0]))


# --- masked softmax --------------------------------------------------------


def test_softmax_examples():
    out = nx.masked_softmax_rows(m([[1, 1, 1]]), [True, True, True])
    np.testing.assert_allclose(out, [[1 / 3] * 3], atol=1e-15)
    out = nx.masked_softmax_rows(m([[0, math.log(2)]]), [True, True])
    np.testing.assert_allclose(out, [[1 / 3, 2 / 3]], atol=1e-15)
    out = nx.masked_softmax_rows(m([[5, 100]]), [True, False])
    np.testing.assert_array_equal(out, [[1.0, 0.0]])


def test_softmax_empty_mask_errors():
    with pytest.raises(MaskError):
        nx.masked_softmax_rows(m([[1, 2]]), [False, False])


def test_mask_padding_must_be_suffix():
    with pytest.raises(MaskError):
        nx.check_mask([True, False, True])


@st.composite
def logits_and_mask(draw):
    n = draw(st.integers(1, 5))
    k = draw(st.integers(1, 6))
    real = draw(st.integers(1, k))
    e = draw(arrays(np.float64, (n, k), elements=st.floats(-50, 50)))
    return e, np.arange(k) < real


@given(logits_and_mask(), st.floats(-100, 100))
@settings(max_examples=200, deadline=None)
def test_softmax_rows_normalized_and_shift_invariant(case, shift):
    e, mask = case
    s = nx.masked_softmax_rows(e, mask)
    np.testing.assert_allclose(s[:, mask].sum(axis=1), 1.0, atol=1e-6)
    assert np.all(s[:, ~mask] == 0.0)
    assert np.all(s >= 0.0)
    np.testing.assert_allclose(nx.masked_softmax_rows(e + shift, mask), s, atol=1e-9)


# --- concat / row sum ------------------------------------------------------


def test_concat_examples():
    np.testing.assert_array_equal(nx.concat_cols(m([[1]]), m([[2]])), m([[1, 2]]))
    np.testing.assert_array_equal(nx.concat_cols(m([[1, 2]]), m([[3]])), m([[1, 2, 3]]))
    a, b = nx.concat_cols_backward(m([[4, 5, 6]]), 2)
    np.testing.assert_array_equal(a, [[4, 5]])
    np.testing.assert_array_equal(b, [[6]])
    with pytest.raises(ShapeError):
        nx.concat_cols(np.ones((2, 1)), np.ones((1, 1)))


@given(arrays(np.float64, (3, 4), elements=st.floats(-1e6, 1e6)), st.integers(0, 4))
def test_concat_split_roundtrip_is_exact(x, p):
    left, right = x[:, :p], x[:, p:]
    a, b = nx.concat_cols_backward(nx.concat_cols(left, right), p)
    assert a.tobytes() == left.tobytes() and b.tobytes() == right.tobytes()


def test_masked_row_sum_examples():
    np.testing.assert_array_equal(nx.masked_row_sum(m([[1, 2], [3, 4]]), [True, True]), [[4, 6]])
    np.testing.assert_array_equal(nx.masked_row_sum(m([[1, 2], [9, 9]]), [True, False]), [[1, 2]])
    np.testing.assert_array_equal(nx.masked_row_sum(m([[5, 6]]), [True]), [[5, 6]])


def test_masked_row_sum_adjoint_of_padding_is_exactly_zero():
    dv = nx.masked_row_sum_backward(m([[3.0, -2.0]]), [True, True, False, False])
    assert np.all(dv[2:] == 0.0)
    np.testing.assert_array_equal(dv[:2], [[3, -2], [3, -2]])


# --- backward vs finite differences ----------------------------------------


def test_all_backward_ops_match_finite_differences(rng):
    u = lambda *shape: rng.uniform(-1, 1, shape)
    x, W, b = u(3, 4), u(4, 2), u(1, 2)
    dout = u(3, 2)
    dx, dW, db = nx.affine_backward(dout, x, W)
    assert rel_err(dx, numeric_vjp(lambda t: nx.affine(t, W, b), x, dout)) < 1e-4
    assert rel_err(dW, numeric_vjp(lambda t: nx.affine(x, t, b), W, dout)) < 1e-4
    assert rel_err(db, numeric_vjp(lambda t: nx.affine(x, W, t), b, dout)) < 1e-4

    z = u(4, 5)
    z[np.abs(z) < 0.05] = 0.5
    dz = u(4, 5)
    assert rel_err(nx.relu_backward(dz, z), numeric_vjp(nx.relu, z, dz)) < 1e-4

    mask = np.array([True, True, True, False])
    e, de = u(3, 4), u(3, 4)
    s = nx.masked_softmax_rows(e, mask)
    got = nx.masked_softmax_rows_backward(de, s)
    assert rel_err(got, numeric_vjp(lambda t: nx.masked_softmax_rows(t, mask), e, de)) < 1e-4

    p, q = u(2, 3), u(2, 2)
    dc = u(2, 5)
    da, dq = nx.concat_cols_backward(dc, 3)
    assert rel_err(da, numeric_vjp(lambda t: nx.concat_cols(t, q), p, dc)) < 1e-4
    assert rel_err(dq, numeric_vjp(lambda t: nx.concat_cols(p, t), q, dc)) < 1e-4

    v, ds = u(4, 3), u(1, 3)
    got = nx.masked_row_sum_backward(ds, mask)
    assert rel_err(got, numeric_vjp(lambda t: nx.masked_row_sum(t, mask), v, ds)) < 1e-4

    dd = u(3, 4)
    got = nx.dropout_backward(dd, 0.3, 9, True)
    assert rel_err(got, numeric_vjp(lambda t: nx.dropout(t, 0.3, 9, True), x, dd)) < 1e-4


# --- dropout ---------------------------------------------------------------


def test_dropout_identity_cases(rng):
    x = rng.normal(size=(5, 7))
    assert nx.dropout(x, 0.0, 1, True).tobytes() == x.tobytes()
    assert nx.dropout(x, 0.2, 1, False).tobytes() == x.tobytes()


def test_dropout_same_seed_same_mask(rng):
    x = rng.normal(size=(20, 20))
    np.testing.assert_array_equal(nx.dropout(x, 0.4, (3, 1), True), nx.dropout(x, 0.4, (3, 1), True))
    assert not np.array_equal(nx.dropout(x, 0.4, 1, True), nx.dropout(x, 0.4, 2, True))


def test_dropout_statistics():
    x = np.ones((1000, 1000))
    out = nx.dropout(x, 0.5, 2024, True)
    survive = np.mean(out != 0.0)
    assert abs(survive - 0.5) <= 0.01
    assert abs(out.mean() - 1.0) <= 0.01


def test_dropout_rejects_ratio_one():
    with pytest.raises(ValueError):
        nx.dropout(np.ones((1, 1)), 1.0, 0, True)


# --- grad_check ------------------------------------------------------------


def test_grad_check_linear_function_is_exact(rng):
    params = {"x": rng.uniform(-1, 1, (2, 3)), "W": rng.uniform(-1, 1, (3, 4)),
              "b": rng.uniform(-1, 1, (1, 4))}

    def f(p):
        out = nx.affine(p["x"], p["W"], p["b"])
        dx, dW, db = nx.affine_backward(np.ones_like(out), p["x"], p["W"])
        return out.sum(), {"x": dx, "W": dW, "b": db}

    assert nx.grad_check(f, params, eps=1e-5) < 1e-7


def test_grad_check_through_relu(rng):
    x = rng.uniform(0.2, 1.0, (3, 3)) * rng.choice([-1, 1], (3, 3))

    def f(p):
        y = nx.relu(p["x"])
        return float((y ** 2).sum()), {"x": nx.relu_backward(2 * y, p["x"])}

    assert nx.grad_check(f, {"x": x}) < 1e-4


def test_grad_check_constant_function():
    def f(p):
        return 3.0, {"x": np.zeros_like(p["x"])}

    assert nx.grad_check(f, {"x": np.ones((2, 2))}) == 0.0


def test_grad_check_rejects_non_finite():
    with pytest.raises(NumericError):
        nx.grad_check(lambda p: (float("nan"), {"x": p["x"]}), {"x": np.ones((1, 1))})


def test_adjoint_pair_shapes():
    pair = nx.AdjointPair.zeros_like(np.ones((2, 3)))
    assert pair.adjoint.shape == (2, 3)
    with pytest.raises(ShapeError):
        nx.AdjointPair(np.ones((2, 3)), np.ones((3, 2)))
