import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from mrpalloc import (CommandEvaluator, LpsProfile, MrpError, OutlierSpec, OutputDistance,
                      ValidationError, apply_plan, evaluate_output_distance, gen_calibration,
                      gen_model, outlier_shift, profile_lps, reversal_rate)
from mrpalloc.propagation import Block, BlockStack, CalibrationBatch, Layer


def test_output_distance_identity(small_model, small_calib):
    assert evaluate_output_distance(small_model, small_model, small_calib) == 0.0


def test_output_distance_full_degradation(rng):
    w = [np.abs(rng.standard_normal((4, 4))) for _ in range(4)]
    dense = BlockStack(tuple(Block((Layer("a", w[i]), Layer("b", w[i + 1])), residual=False) for i in (0, 2)))
    zeroed = apply_plan(dense, [1.0, 1.0], "magnitude")
    calib = CalibrationBatch(np.abs(rng.standard_normal((6, 4))))
    assert evaluate_output_distance(dense, zeroed, calib) == 1.0


def test_output_distance_matches_independent_forward():
    model = gen_model(11, 3, 8, OutlierSpec((0.1, 0.0, 0.2), (4.0, 1.0, 4.0)))
    calib = gen_calibration(12, 5, 8)
    pruned = apply_plan(model, [0.0, 0.5, 0.0], "magnitude")
    got = evaluate_output_distance(model, pruned, calib)
    spec = lambda m: [[(l.weight.tolist(), None if l.mask is None else l.mask.tolist()) for l in b.layers]
                      for b in m.blocks]
    ref = oracles.forward(spec(model), calib.inputs.tolist())
    out = oracles.forward(spec(pruned), calib.inputs.tolist())
    assert got > 0
    assert got == pytest.approx(oracles.output_distance(ref, out), rel=1e-10)


def test_output_distance_architecture_mismatch(small_model, small_calib):
    with pytest.raises(ValidationError):
        evaluate_output_distance(small_model, BlockStack(small_model.blocks[:2]), small_calib)


def test_lps_zero_probe_is_zero(small_model, small_calib):
    for metric in ("magnitude", "wanda"):
        prof = profile_lps(small_model, small_calib, metric, 0.0)
        np.testing.assert_array_equal(prof.values, np.zeros(3))


def test_lps_deterministic_and_tagged(small_model, small_calib):
    a = profile_lps(small_model, small_calib, "wanda", 0.5)
    b = profile_lps(small_model, small_calib, "wanda", 0.5)
    np.testing.assert_array_equal(a.values, b.values)
    assert a.metric_tag == "wanda" and a.probe_ratio == 0.5 and a.evaluator == "output_distance"
    assert (a.values > 0).all()


def test_lps_outlier_free_block_is_least_sensitive(hetero_model, calib64):
    prof = profile_lps(hetero_model, calib64, "magnitude", 0.7)
    assert int(np.argmin(prof.values)) == 1


def test_lps_semi_structured(small_model, small_calib):
    prof = profile_lps(small_model, small_calib, "magnitude", 0.5, granularity="2:4")
    assert (prof.values > 0).all()


def test_lps_evaluator_errors_name_block(small_model, small_calib):
    calls = []

    def flaky(model, calib):
        calls.append(1)
        if len(calls) == 3:
            raise RuntimeError("boom")
        return 0.0

    with pytest.raises(MrpError, match="block 1"):
        profile_lps(small_model, small_calib, "magnitude", 0.5, flaky)


def test_command_evaluator(tmp_path, small_model, small_calib):
    script = tmp_path / "eval.py"
    script.write_text(
        "import sys\n"
        "from safetensors.numpy import load_file\n"
        "t = load_file(sys.argv[1])\n"
        "print('loading done')\n"
        "print(sum(float((v == 0).sum()) for v in t.values()))\n")
    ev = CommandEvaluator(f"{sys.executable} {script} {{model}}")
    assert ev(small_model, small_calib) == 0.0
    pruned = apply_plan(small_model, [0.5, 0.0, 0.0], "magnitude")
    assert ev(pruned, small_calib) == pruned.blocks[0].size * 0.5
    prof = profile_lps(small_model, small_calib, "magnitude", 0.5, ev)
    np.testing.assert_array_equal(prof.values, small_model.block_sizes * 0.5)

    bad = CommandEvaluator(f"{sys.executable} -c \"print('nan-ish')\"")
    with pytest.raises(MrpError):
        bad(small_model, small_calib)


def test_reversal_examples():
    assert reversal_rate([1, 2, 3], [1, 2, 3]) == 0.0
    assert reversal_rate([1, 2, 3], [3, 2, 1]) == 1.0
    assert reversal_rate([1, 2, 3], [1, 3, 2]) == pytest.approx(1 / 3)
    assert reversal_rate([1, 1, 3], [2, 1, 0]) == pytest.approx(2 / 3)  # tied pair not counted
    with pytest.raises(ValidationError):
        reversal_rate([1, 2], [1, 2, 3])
    with pytest.raises(ValidationError):
        reversal_rate([1], [1])


def test_reversal_adjacent_pairs():
    assert reversal_rate([1, 2, 3, 4], [2, 1, 3, 4], adjacent=True) == pytest.approx(1 / 3)
    assert reversal_rate([1, 3, 2], [1, 2, 3], adjacent=True) == 0.5


def test_reversal_matches_pair_oracle(rng):
    for _ in range(30):
        n = int(rng.integers(2, 12))
        a = rng.integers(0, 5, n).astype(float)
        b = rng.integers(0, 5, n).astype(float)
        assert reversal_rate(a, b) == oracles.reversal(a.tolist(), b.tolist())


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=2, max_size=10).flatmap(
    lambda a: st.tuples(st.just(a), st.lists(st.floats(0, 100), min_size=len(a), max_size=len(a)))),
    st.floats(0.01, 100))
def test_reversal_symmetric_and_scale_invariant(ab, c):
    a, b = ab
    assert reversal_rate(a, b) == reversal_rate(b, a)
    # rounding is monotone, so scaling can create ties but never flip an order
    assert reversal_rate(a, [x * c for x in a]) == 0.0


def test_lps_profile_validation():
    with pytest.raises(ValidationError):
        LpsProfile([-1.0])


@pytest.fixture(scope="module")
def four_blocks():
    model = gen_model(5, 4, 64, OutlierSpec((0.05, 0.1, 0.0, 0.15), (5.0,) * 4))
    return model, gen_calibration(6, 128, 64)


def test_shift_zero_plan(four_blocks):
    model, calib = four_blocks
    np.testing.assert_array_equal(outlier_shift(model, calib, "wanda", [0, 0, 0, 0]), np.zeros(4))


def test_shift_last_block_has_no_downstream(four_blocks):
    model, calib = four_blocks
    np.testing.assert_array_equal(outlier_shift(model, calib, "wanda", [0, 0, 0, 0.7]), np.zeros(4))


def test_shift_first_block_moves_downstream(four_blocks):
    model, calib = four_blocks
    delta = outlier_shift(model, calib, "wanda", [0.7, 0, 0, 0])
    assert delta[0] == 0.0
    assert (np.abs(delta[1:]) > 0).any()


def test_shift_blocks_before_prefix_unchanged(four_blocks):
    model, calib = four_blocks
    delta = outlier_shift(model, calib, "wanda", [0, 0.7, 0.5, 0])
    assert delta[0] == 0.0 and delta[1] == 0.0


def test_shift_magnitude_ignores_inputs(four_blocks):
    model, calib = four_blocks
    np.testing.assert_array_equal(outlier_shift(model, calib, "magnitude", [0.7, 0, 0, 0]), np.zeros(4))


def test_shift_rejects_nonzero_suffix(four_blocks):
    model, calib = four_blocks
    with pytest.raises(ValidationError):
        outlier_shift(model, calib, "wanda", [0.7, 0, 0.3, 0], prefix_len=1)
    with pytest.raises(ValidationError):
        outlier_shift(model, calib, "wanda", [0.7, 0, 0])
