"""Empirical instruments: pruning sensitivity profiles, sensitivity reversal,
and the downstream outlier shift caused by pruning earlier blocks."""

import itertools
import os
import shlex
import subprocess
import tempfile
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import MrpError, ValidationError
from .metrics import get_metric, score
from .propagation import BlockStack, CalibrationBatch, expand_block_inputs, forward, forward_collect, block_inputs
from .pruning import Granularity, apply_plan, layer_mask
from .redundancy import OutlierConfig, RedundancyProfile, model_lrl


@dataclass(frozen=True)
class LpsProfile:
    values: np.ndarray
    metric_tag: str = ""
    probe_ratio: float = 0.0
    evaluator: str = ""

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise ValidationError("an LPS profile is a vector")
        if (v < 0).any() or not np.isfinite(v).all():
            raise ValidationError(f"LPS entries must be finite and >= 0: {v}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.size


def _check_same_architecture(a: BlockStack, b: BlockStack):
    if len(a) != len(b):
        raise ValidationError(f"models differ in block count: {len(a)} vs {len(b)}")
    for i, (x, y) in enumerate(zip(a.blocks, b.blocks)):
        if [l.shape for l in x.layers] != [l.shape for l in y.layers] \
                or x.residual != y.residual or x.nonlinearity != y.nonlinearity:
            raise ValidationError(f"models differ in block {i}")


def evaluate_output_distance(dense: BlockStack, pruned: BlockStack, calib: CalibrationBatch) -> float:
    """Mean absolute output difference relative to the mean absolute dense output."""
    _check_same_architecture(dense, pruned)
    ref = forward(dense, calib)
    out = forward(pruned, calib)
    diff = float(np.abs(ref - out).mean())
    scale = float(np.abs(ref).mean())
    if scale == 0.0:
        # Degenerate reference: report the raw difference rather than dividing by zero.
        return diff
    return diff / scale


class OutputDistance:
    """Evaluator scoring a model by its output distance to a fixed reference."""

    name = "output_distance"

    def __init__(self, reference: BlockStack):
        self.reference = reference

    def __call__(self, model, calib):
        return evaluate_output_distance(self.reference, model, calib)


class CommandEvaluator:
    """Run an external command and read a float from the last line of its stdout.

    ``{model}`` in the command is replaced by the path of a temporary tensor
    file holding the masked (zero-applied) weights; ``{calib}`` by the
    calibration batch.
    """

    def __init__(self, command: str, timeout: Optional[float] = None):
        self.command = command
        self.timeout = timeout
        self.name = f"command:{command}"

    def __call__(self, model, calib):
        from .io import export_calibration, export_model

        with tempfile.TemporaryDirectory() as tmp:
            mpath = os.path.join(tmp, "model.safetensors")
            cpath = os.path.join(tmp, "calib.safetensors")
            export_model(model, mpath, apply_masks=True)
            export_calibration(calib, cpath)
            argv = [a.format(model=mpath, calib=cpath) for a in shlex.split(self.command)]
            proc = subprocess.run(argv, capture_output=True, text=True, timeout=self.timeout)
        if proc.returncode != 0:
            raise MrpError(f"evaluator command exited with {proc.returncode}: {proc.stderr.strip()}")
        lines = proc.stdout.strip().splitlines()
        try:
            value = float(lines[-1])
        except (IndexError, ValueError):
            raise MrpError(f"evaluator printed no number: {proc.stdout!r}") from None
        if not np.isfinite(value):
            raise MrpError(f"evaluator returned non-finite value {value}")
        return value


def profile_lps(model: BlockStack, calib: CalibrationBatch, metric, r: float,
                evaluator: Optional[Callable] = None, granularity="unstructured") -> LpsProfile:
    """``S_l = |eval(model) - eval(model with only block l pruned to r)|`` for each block."""
    if not 0.0 <= r <= 1.0:
        raise ValidationError(f"probe ratio must lie in [0, 1], got {r}")
    evaluator = evaluator or OutputDistance(model)
    g = Granularity.parse(granularity)
    needs = get_metric(metric).needs_activations
    acts = forward_collect(model, calib) if needs else None
    base = evaluator(model, calib)
    values = []
    for l, block in enumerate(model.blocks):
        masks = []
        for layer in block.layers:
            s = score(metric, layer.masked_weight(), acts[l][layer.name] if needs else None)
            prior = layer.keep if g.kind == "unstructured" else None
            if prior is not None and prior.size - np.count_nonzero(prior) > r * prior.size:
                masks.append(layer.mask)
                continue
            masks.append(layer_mask(s, r, g, prior).bits)
        probe = model.with_block(l, block.with_masks(masks))
        try:
            val = evaluator(probe, calib)
        except Exception as exc:
            raise MrpError(f"evaluator failed while probing block {l}: {exc}") from exc
        values.append(abs(base - val))
    return LpsProfile(np.array(values), str(metric), r, getattr(evaluator, "name", repr(evaluator)))


def _pairs(n, adjacent):
    if adjacent:
        return [(i, i + 1) for i in range(n - 1)]
    return list(itertools.combinations(range(n), 2))


def reversal_rate(a, b, adjacent=False) -> float:
    """Fraction of block pairs whose strict sensitivity order flips between ``a`` and ``b``.

    Pairs tied in either profile do not count as reversed. ``adjacent``
    restricts the pairs to neighbouring blocks.
    """
    va = np.asarray(getattr(a, "values", a), dtype=np.float64)
    vb = np.asarray(getattr(b, "values", b), dtype=np.float64)
    if va.shape != vb.shape:
        raise ValidationError(f"profiles differ in length: {va.size} vs {vb.size}")
    if va.size < 2:
        raise ValidationError("reversal rate needs at least two blocks")
    if adjacent:
        sa, sb = np.sign(np.diff(va)), np.sign(np.diff(vb))
        return float(np.count_nonzero(sa * sb < 0)) / (va.size - 1)
    i, j = np.triu_indices(va.size, k=1)
    flips = np.sign(va[i] - va[j]) * np.sign(vb[i] - vb[j]) < 0
    return float(np.count_nonzero(flips)) / i.size


def outlier_shift(model: BlockStack, calib: CalibrationBatch, metric, prefix_plan,
                  cfg: OutlierConfig = OutlierConfig(), prefix_len: Optional[int] = None):
    """Change in each block's outlier ratio caused by pruning earlier blocks.

    The prefix plan is applied to the dense model and calibration data is
    pushed through it. Each block's outlier ratio (1 - redundancy) is then
    measured on its own dense weights, fed with the refreshed block input,
    and compared with the fully dense model. Only the input distribution
    differs between the two measurements, so blocks at or before the first
    pruned block always show zero shift. Activation-free metrics such as
    magnitude therefore always give zeros.
    """
    ratios = np.asarray(getattr(prefix_plan, "ratios", prefix_plan), dtype=np.float64)
    if ratios.shape != (len(model),):
        raise ValidationError(f"plan has {ratios.size} ratios, model has {len(model)} blocks")
    if prefix_len is None:
        nz = np.flatnonzero(ratios)
        prefix_len = int(nz[-1]) + 1 if nz.size else 0
    if not 0 <= prefix_len <= len(model):
        raise ValidationError(f"prefix length {prefix_len} out of range")
    if (ratios[prefix_len:] != 0).any():
        raise ValidationError(f"plan prunes blocks beyond the first {prefix_len}; "
                              "the shift experiment only prunes a prefix")
    dense = model.dense()
    dense_acts = forward_collect(dense, calib)
    pruned = apply_plan(dense, ratios, metric, dense_acts)
    refreshed = expand_block_inputs(dense, block_inputs(forward_collect(pruned, calib), pruned))
    before = model_lrl(dense, dense_acts, metric, cfg).values
    after = model_lrl(dense, refreshed, metric, cfg).values
    return (1.0 - after) - (1.0 - before)
