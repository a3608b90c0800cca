import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from elastic_kv import numkern as nk
from elastic_kv.oracle import oracle_causal_softmax, oracle_matmul

finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


def test_matmul_identity():
    m = np.array([[1.5, -2.0], [0.25, 4.0]])
    assert np.array_equal(nk.matmul(np.eye(2), m), m)


def test_matmul_hand_case():
    assert nk.matmul([[1, 2], [3, 4]], [[0], [1]]).tolist() == [[2.0], [4.0]]


def test_matmul_matches_triple_loop(rng):
    a, b = rng.standard_normal((8, 8)), rng.standard_normal((8, 8))
    np.testing.assert_allclose(nk.matmul(a, b), oracle_matmul(a, b), rtol=0, atol=1e-12)


def test_matmul_dimension_mismatch():
    with pytest.raises(nk.NumericError):
        nk.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_rejects_non_finite():
    with pytest.raises(nk.NumericError):
        nk.matmul([[1e308, 1e308]], [[1e308], [1e308]])


def test_matmul_repeatable(rng):
    a, b = rng.standard_normal((33, 17)), rng.standard_normal((17, 9))
    assert nk.matmul(a, b).tobytes() == nk.matmul(a, b).tobytes()


@given(arrays(np.float64, (5, 5), elements=finite))
def test_matmul_identity_exact(m):
    eye = np.eye(5)
    assert np.array_equal(nk.matmul(m, eye), m)
    assert np.array_equal(nk.matmul(eye, m), m)


def test_causal_softmax_single_token():
    assert nk.row_softmax_causal([[3.7]]).tolist() == [[1.0]]


def test_causal_softmax_zeros():
    a = nk.row_softmax_causal(np.zeros((2, 2)))
    assert a[1].tolist() == [0.5, 0.5]
    assert a[0].tolist() == [1.0, 0.0]


def test_causal_softmax_log_scores():
    s = np.zeros((3, 3))
    s[2] = [math.log(2), 0.0, 0.0]
    np.testing.assert_allclose(nk.row_softmax_causal(s)[2], [0.5, 0.25, 0.25], atol=1e-15)


def test_causal_softmax_needs_square():
    with pytest.raises(nk.NumericError):
        nk.row_softmax_causal(np.zeros((2, 3)))


@given(arrays(np.float64, st.integers(1, 12).map(lambda t: (t, t)), elements=finite))
def test_causal_softmax_rows_normalised(s):
    a = nk.row_softmax_causal(s)
    t = s.shape[0]
    for m in range(t):
        assert abs(a[m, : m + 1].sum() - 1.0) < 1e-9
        assert np.all(a[m, m + 1 :] == 0.0)


def test_causal_softmax_large_scores_stable():
    a = nk.row_softmax_causal(np.full((4, 4), 1e4))
    np.testing.assert_allclose(a[3], [0.25] * 4)


def test_kernels_match_scalar_oracles(rng):
    a, b = rng.standard_normal((16, 16)), rng.standard_normal((16, 16))
    np.testing.assert_allclose(nk.matmul(a, b), oracle_matmul(a, b), rtol=1e-10, atol=1e-13)
    s = rng.standard_normal((16, 16)) * 3
    np.testing.assert_allclose(nk.row_softmax_causal(s), oracle_causal_softmax(s), rtol=1e-10,
                               atol=1e-15)
    x = rng.standard_normal((16, 16))
    naive = [math.log(sum(math.exp(v) for v in row)) for row in x]
    np.testing.assert_allclose(nk.logsumexp(x), naive, rtol=1e-10)


def test_softmax_rows_sum_to_one(rng):
    p = nk.softmax_rows(rng.standard_normal((4, 7)) * 50)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_layer_norm_moments(rng):
    y = nk.layer_norm(rng.standard_normal((3, 64)) * 5 + 2, np.ones(64), np.zeros(64))
    np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.std(axis=1), 1.0, atol=1e-5)


def test_gelu_reference_points():
    assert nk.gelu(np.array([0.0]))[0] == 0.0
    assert abs(nk.gelu(np.array([1.0]))[0] - 0.8411919906) < 1e-9


def test_log_softmax_shift_invariant(rng):
    x = rng.standard_normal(10)
    np.testing.assert_allclose(nk.log_softmax(x), nk.log_softmax(x + 123.0), atol=1e-12)


def test_argmax_and_top_k_tie_rule():
    x = np.array([1.0, 3.0, 3.0, 0.5, 3.0])
    assert nk.argmax(x) == 1
    assert nk.top_k(x, 3).tolist() == [1, 2, 4]
    assert nk.top_k(x, 0).tolist() == []
    with pytest.raises(nk.NumericError):
        nk.top_k(x, 6)


@settings(max_examples=50)
@given(st.lists(st.integers(-3, 3), min_size=1, max_size=20), st.data())
def test_top_k_is_best_first(values, data):
    x = np.array(values, dtype=float)
    k = data.draw(st.integers(0, len(values)))
    idx = nk.top_k(x, k)
    assert sorted(x[idx].tolist(), reverse=True) == x[idx].tolist()
    assert sorted(x.tolist(), reverse=True)[:k] == x[idx].tolist()
