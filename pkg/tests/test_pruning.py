import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from mrpalloc import (Granularity, ValidationError, apply_plan, forward_collect,
                      mask_semi_structured, mask_structured_rows, mask_unstructured,
                      measure_global_sparsity)
from mrpalloc.pruning import effective_ratios, quantize_nm

SCORES = [[1, 4], [3, 8]]


def test_unstructured_keeps_top_half():
    m = mask_unstructured(SCORES, 0.5)
    np.testing.assert_array_equal(m.bits, oracles.unstructured_keep(SCORES, 0.5))
    np.testing.assert_array_equal(m.bits, [[False, True], [False, True]])


def test_unstructured_identity_and_full():
    assert mask_unstructured(SCORES, 0.0).bits.all()
    assert not mask_unstructured(SCORES, 1.0).bits.any()


def test_unstructured_matches_sort_oracle(rng):
    s = rng.integers(0, 5, size=(6, 7)).astype(float)  # many ties
    for r in (0.1, 0.33, 0.5, 0.9):
        np.testing.assert_array_equal(mask_unstructured(s, r).bits,
                                      oracles.unstructured_keep(s.tolist(), r))


def test_unstructured_is_monotone_and_rejects_unpruning(rng):
    s = rng.random((5, 5))
    first = mask_unstructured(s, 0.4)
    # new scores disagree with the old ranking; old victims must stay pruned
    second = mask_unstructured(rng.random((5, 5)), 0.6, first)
    assert not (second.bits & ~first.bits).any()
    assert second.n_masked == int(0.6 * 25)
    with pytest.raises(ValidationError):
        mask_unstructured(s, 0.2, first)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(0, 10)), st.floats(0, 1), st.floats(0, 1))
def test_unstructured_nesting(s, a, b):
    a, b = sorted((a, b))
    ma = mask_unstructured(s, a)
    mb = mask_unstructured(s, b)
    assert not (mb.bits & ~ma.bits).any()  # pruned(a) subset of pruned(b)


def test_semi_structured_examples():
    m = mask_semi_structured(SCORES, 1, 2)
    np.testing.assert_array_equal(m.bits, oracles.semi_keep(SCORES, 1, 2))
    assert m.granularity == "1:2"
    assert mask_semi_structured(SCORES, 0, 2).bits.all()
    with pytest.raises(ValidationError):
        mask_semi_structured(np.ones((2, 6)), 2, 4)


@pytest.mark.parametrize("n", [4, 5, 6])
def test_semi_structured_counts_exhaustive(rng, n):
    s = rng.random((4, 8))
    m = mask_semi_structured(s, n, 8)
    assert ((~m.bits).sum(axis=1) == n).all()
    np.testing.assert_array_equal(m.bits, oracles.semi_keep(s.tolist(), n, 8))


def test_semi_structured_ties_by_index():
    m = mask_semi_structured([[2.0, 2.0, 2.0, 2.0]], 2, 4)
    np.testing.assert_array_equal(m.bits, [[False, False, True, True]])


def test_structured_rows():
    assert mask_structured_rows(SCORES, 0.0).bits.all()
    assert not mask_structured_rows(SCORES, 1.0).bits.any()
    m = mask_structured_rows([[1, 4], [50, 50]], 0.5)
    np.testing.assert_array_equal(m.bits, [[False, False], [True, True]])
    assert set(map(tuple, m.bits.astype(int))) <= {(0, 0), (1, 1)}


def test_structured_rows_mean_aggregate():
    s = [[3, 3, 3], [4, 0, 0]]
    assert mask_structured_rows(s, 0.5, "sum").bits[1].sum() == 0
    assert mask_structured_rows(s, 0.5, "mean").bits[1].sum() == 0


def test_quantize_nm_rounds_half_toward_fewer():
    assert quantize_nm(0.6, 8) == 5
    assert quantize_nm(0.5, 8) == 4
    assert quantize_nm(0.5625, 8) == 4  # 4.5 -> 4
    assert quantize_nm(0.75, 8) == 6
    np.testing.assert_allclose(effective_ratios([0.6, 0.7], "4:8"), [0.625, 0.75])


def test_granularity_parse():
    assert Granularity.parse("4:8") == Granularity("semi", 4, 8)
    assert Granularity.parse("structured").kind == "rows"
    assert Granularity.parse("unstructured").tag == "unstructured"
    with pytest.raises(ValidationError):
        Granularity.parse("diagonal")


def test_apply_plan_zero_is_identity(small_model, small_calib):
    acts = forward_collect(small_model, small_calib)
    pruned = apply_plan(small_model, [0.0] * 3, "wanda", acts)
    assert measure_global_sparsity(pruned) == 0.0


def test_apply_plan_uniform_hits_ratio(small_model, small_calib):
    acts = forward_collect(small_model, small_calib)
    pruned = apply_plan(small_model, [0.5] * 3, "wanda", acts)
    total = sum(l.size for b in small_model.blocks for l in b.layers)
    expected = sum(int(0.5 * l.size) for b in small_model.blocks for l in b.layers) / total
    assert measure_global_sparsity(pruned) == expected


def test_apply_plan_one_hot(small_model):
    pruned = apply_plan(small_model, [0.0, 0.7, 0.0], "magnitude")
    per_block = [sum(l.n_masked for l in b.layers) for b in pruned.blocks]
    assert per_block[0] == per_block[2] == 0 and per_block[1] > 0


def test_apply_plan_semi_structured(small_model):
    pruned = apply_plan(small_model, [0.5, 0.6, 0.75], "magnitude", granularity="2:4")
    # 0.5 -> 2:4, 0.6 -> 2.4 -> 2:4, 0.75 -> 3:4
    for b, n in zip(pruned.blocks, [2, 2, 3]):
        for l in b.layers:
            groups = (~l.keep).reshape(l.shape[0], -1, 4).sum(axis=-1)
            assert (groups == n).all()


def test_apply_plan_deterministic(small_model, small_calib):
    acts = forward_collect(small_model, small_calib)
    a = apply_plan(small_model, [0.3, 0.6, 0.9], "wanda", acts)
    b = apply_plan(small_model, [0.3, 0.6, 0.9], "wanda", acts)
    for x, y in zip(a.masks(), b.masks()):
        for p, q in zip(x, y):
            np.testing.assert_array_equal(p, q)


def test_masked_weights_are_zero_in_forward(small_model):
    pruned = apply_plan(small_model, [0.9, 0.9, 0.9], "magnitude")
    for b in pruned.blocks:
        for l in b.layers:
            assert (l.masked_weight()[~l.keep] == 0).all()
            assert not np.shares_memory(l.weight, l.masked_weight())


def test_apply_plan_length_mismatch(small_model):
    with pytest.raises(ValidationError):
        apply_plan(small_model, [0.5], "magnitude")
