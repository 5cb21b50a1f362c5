import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from mrpalloc import Metric, ScoreMatrix, ValidationError, DimensionError, register_metric, score
from mrpalloc.metrics import column_norms, get_metric, score_magnitude, score_wanda

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_magnitude_examples():
    np.testing.assert_array_equal(score_magnitude([[-3, 1]]).values, [[3, 1]])
    np.testing.assert_array_equal(score_magnitude(np.zeros((2, 2))).values, np.zeros((2, 2)))
    assert score_magnitude([[1.0]]).metric_tag == "magnitude"


def test_magnitude_matches_loop_oracle(rng):
    w = rng.standard_normal((5, 7))
    np.testing.assert_array_equal(score_magnitude(w).values, oracles.magnitude(w.tolist()))


def test_magnitude_rejects_nonfinite_and_names_index():
    w = np.ones((3, 3))
    w[1, 2] = np.nan
    with pytest.raises(ValidationError, match=r"\(1, 2\)"):
        score_magnitude(w)


def test_wanda_hand_example():
    s = score_wanda([[1, -2], [3, 4]], [[1, 0], [0, 2]])
    np.testing.assert_array_equal(s.values, [[1, 4], [3, 8]])
    assert s.metric_tag == "wanda"


def test_wanda_unit_activations_reduce_to_magnitude(rng):
    w = rng.standard_normal((4, 6))
    np.testing.assert_array_equal(score_wanda(w, np.ones((1, 6))).values, score_magnitude(w).values)


def test_wanda_matches_loop_oracle(rng):
    w = rng.standard_normal((8, 8))
    x = rng.standard_normal((16, 8))
    np.testing.assert_allclose(score_wanda(w, x).values, oracles.wanda(w.tolist(), x.tolist()),
                               rtol=1e-6)


def test_wanda_shape_mismatch_reports_both_shapes():
    with pytest.raises(DimensionError) as err:
        score_wanda(np.ones((2, 3)), np.ones((4, 5)))
    assert "(4, 5)" in str(err.value) and "(2, 3)" in str(err.value)


def test_wanda_rejects_nonfinite_activations():
    x = np.ones((2, 2))
    x[0, 0] = np.inf
    with pytest.raises(ValidationError):
        score_wanda(np.ones((2, 2)), x)


def test_float32_weights_scored_in_float64():
    w = np.array([[1e-3, 2.0]], dtype=np.float32)
    assert score_magnitude(w).values.dtype == np.float64
    assert score_wanda(w, np.ones((3, 2), dtype=np.float32)).values.dtype == np.float64


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 5), elements=finite), arrays(np.float64, (6, 5), elements=finite),
       st.floats(-100, 100, allow_nan=False))
def test_wanda_scale_equivariance(w, x, c):
    lhs = score_wanda(c * w, x).values
    rhs = abs(c) * score_wanda(w, x).values
    np.testing.assert_allclose(lhs, rhs, rtol=1e-6, atol=1e-300)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (5, 4), elements=finite), arrays(np.float64, (7, 4), elements=finite),
       st.randoms(use_true_random=False))
def test_row_permutation_equivariance(w, x, rnd):
    perm = list(range(w.shape[0]))
    rnd.shuffle(perm)
    for metric in (Metric.MAGNITUDE, Metric.WANDA):
        np.testing.assert_array_equal(score(metric, w[perm], x).values, score(metric, w, x).values[perm])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (9, 4), elements=finite),
       st.randoms(use_true_random=False))
def test_wanda_invariant_to_calibration_row_order(w, x, rnd):
    perm = list(range(x.shape[0]))
    rnd.shuffle(perm)
    np.testing.assert_allclose(score_wanda(w, x[perm]).values, score_wanda(w, x).values, rtol=1e-12)


def test_masked_weights_score_zero(rng):
    w = rng.standard_normal((6, 6))
    keep = rng.random((6, 6)) > 0.5
    wm = np.where(keep, w, 0.0)
    x = rng.standard_normal((10, 6))
    for metric in ("magnitude", "wanda"):
        assert (score(metric, wm, x).values[~keep] == 0).all()


def test_column_norm_cache_returns_same_object(rng):
    x = rng.standard_normal((5, 3))
    a = column_norms(x)
    b = column_norms(x.copy())
    assert a is b
    np.testing.assert_allclose(a, np.linalg.norm(x, axis=0))


def test_scoring_is_thread_safe(rng):
    w = rng.standard_normal((16, 16))
    xs = [rng.standard_normal((8, 16)) for _ in range(8)]
    expected = [score_wanda(w, x).values for x in xs]
    results = [None] * len(xs)

    def work(i):
        results[i] = score_wanda(w, xs[i]).values

    threads = [threading.Thread(target=work, args=(i,)) for i in range(len(xs))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for a, b in zip(results, expected):
        np.testing.assert_array_equal(a, b)


def test_register_third_metric():
    register_metric("squared", lambda w, x=None: ScoreMatrix(np.asarray(w, float) ** 2, "squared"),
                    needs_activations=False)
    assert not get_metric("squared").needs_activations
    np.testing.assert_array_equal(score("squared", [[2.0, -3.0]]).values, [[4.0, 9.0]])


def test_unknown_metric_and_missing_activations():
    with pytest.raises(ValidationError):
        score("nope", [[1.0]])
    with pytest.raises(ValidationError):
        score("wanda", [[1.0]])
