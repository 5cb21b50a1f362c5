"""Mask construction (unstructured, N:M, whole rows) and plan application."""

import math
import re
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DimensionError, ValidationError
from .metrics import ScoreMatrix, get_metric, score

# Absorbs float noise such as 0.7 * 10 == 7.000000000000001 before flooring.
_EPS = 1e-9


@dataclass(frozen=True)
class Granularity:
    kind: str = "unstructured"  # unstructured | semi | rows
    n_pruned: int = 0
    group: int = 0
    row_aggregate: str = "sum"

    def __post_init__(self):
        if self.kind not in ("unstructured", "semi", "rows"):
            raise ValidationError(f"unknown granularity {self.kind!r}")
        if self.kind == "semi":
            if self.group < 1 or not 0 <= self.n_pruned <= self.group:
                raise ValidationError(f"invalid N:M pattern {self.n_pruned}:{self.group}")
        if self.row_aggregate not in ("sum", "mean"):
            raise ValidationError(f"row aggregate must be 'sum' or 'mean', got {self.row_aggregate!r}")

    @classmethod
    def parse(cls, text):
        """Accepts ``unstructured``, ``structured``/``rows`` or an ``n:m`` pattern."""
        if isinstance(text, Granularity):
            return text
        t = str(text).strip().lower()
        if t in ("unstructured", ""):
            return cls()
        if t in ("structured", "rows"):
            return cls("rows")
        m = re.fullmatch(r"(\d+):(\d+)", t)
        if m:
            return cls("semi", int(m.group(1)), int(m.group(2)))
        raise ValidationError(f"cannot parse granularity {text!r}")

    @property
    def tag(self):
        if self.kind == "semi":
            return f"{self.n_pruned}:{self.group}"
        return "structured" if self.kind == "rows" else "unstructured"


@dataclass(frozen=True)
class PruneMask:
    bits: np.ndarray  # True = keep
    granularity: str = "unstructured"

    @property
    def n_masked(self):
        return int(self.bits.size - np.count_nonzero(self.bits))

    @property
    def ratio(self):
        return self.n_masked / self.bits.size


def _values(scores):
    a = scores.values if isinstance(scores, ScoreMatrix) else np.asarray(scores, dtype=np.float64)
    if a.ndim != 2:
        raise ValidationError(f"scores must be 2-D, got shape {a.shape}")
    return a


def _check_ratio(ratio):
    if not 0.0 <= ratio <= 1.0:
        raise ValidationError(f"ratio must lie in [0, 1], got {ratio}")


def n_to_prune(ratio, n):
    return min(n, int(math.floor(ratio * n + _EPS)))


def mask_unstructured(scores, ratio, already_masked=None) -> PruneMask:
    """Extend ``already_masked`` with the lowest-scoring live weights.

    Exactly ``floor(ratio * size)`` entries end up pruned. Ties are broken by
    flat index, lowest first.
    """
    a = _values(scores)
    _check_ratio(ratio)
    if already_masked is None:
        keep = np.ones(a.shape, dtype=bool)
    else:
        keep = np.array(getattr(already_masked, "bits", already_masked), dtype=bool)
        if keep.shape != a.shape:
            raise DimensionError("prior mask shape must match scores", keep.shape, a.shape)
    target = n_to_prune(ratio, a.size)
    current = a.size - int(np.count_nonzero(keep))
    if target < current:
        raise ValidationError(f"ratio {ratio} would unprune weights ({current} already masked, "
                              f"target {target}); masks are monotone")
    extra = target - current
    if extra:
        flat_keep = keep.ravel()
        live = np.flatnonzero(flat_keep)
        order = np.argsort(a.ravel()[live], kind="stable")
        flat_keep[live[order[:extra]]] = False
        keep = flat_keep.reshape(a.shape)
    return PruneMask(keep, "unstructured")


def mask_semi_structured(scores, n_pruned, group) -> PruneMask:
    """Prune the ``n_pruned`` lowest scores in every run of ``group`` inputs."""
    a = _values(scores)
    if group < 1 or not 0 <= n_pruned <= group:
        raise ValidationError(f"invalid N:M pattern {n_pruned}:{group}")
    c_out, c_in = a.shape
    if c_in % group:
        raise ValidationError(f"group size {group} does not divide input channels {c_in}")
    groups = a.reshape(c_out, c_in // group, group)
    order = np.argsort(groups, axis=-1, kind="stable")
    keep = np.ones(groups.shape, dtype=bool)
    np.put_along_axis(keep, order[..., :n_pruned], False, axis=-1)
    return PruneMask(keep.reshape(a.shape), f"{n_pruned}:{group}")


def mask_structured_rows(scores, ratio, aggregate="sum") -> PruneMask:
    """Drop the ``floor(ratio * C_out)`` output rows with the lowest aggregate score."""
    a = _values(scores)
    _check_ratio(ratio)
    if aggregate == "sum":
        agg = a.sum(axis=1)
    elif aggregate == "mean":
        agg = a.mean(axis=1)
    else:
        raise ValidationError(f"row aggregate must be 'sum' or 'mean', got {aggregate!r}")
    k = n_to_prune(ratio, a.shape[0])
    keep = np.ones(a.shape, dtype=bool)
    keep[np.argsort(agg, kind="stable")[:k], :] = False
    return PruneMask(keep, "structured")


def quantize_nm(ratio, group):
    """Nearest ``n/group`` to ``ratio``; exact halves round toward fewer pruned."""
    _check_ratio(ratio)
    return int(math.ceil(ratio * group - 0.5 - _EPS))


def effective_ratios(ratios, granularity):
    g = Granularity.parse(granularity)
    r = np.asarray(getattr(ratios, "ratios", ratios), dtype=np.float64)
    if g.kind == "semi":
        return np.array([quantize_nm(x, g.group) / g.group for x in r])
    return r


def layer_mask(scores, ratio, granularity, prior=None):
    g = Granularity.parse(granularity)
    if g.kind == "unstructured":
        return mask_unstructured(scores, ratio, prior)
    if g.kind == "semi":
        return mask_semi_structured(scores, quantize_nm(ratio, g.group), g.group)
    return mask_structured_rows(scores, ratio, g.row_aggregate)


def apply_plan(model, plan, metric, acts=None, granularity="unstructured"):
    """Return a copy of ``model`` with every layer of block ``l`` pruned to ``plan[l]``.

    Masks are rebuilt from the dense weights. For N:M granularity the block
    ratio snaps to the nearest feasible ``n/group`` (see :func:`quantize_nm`).
    """
    ratios = np.asarray(getattr(plan, "ratios", plan), dtype=np.float64)
    if ratios.shape != (len(model),):
        raise ValidationError(f"plan has {ratios.size} ratios, model has {len(model)} blocks")
    needs = get_metric(metric).needs_activations
    masks = []
    for i, (block, r) in enumerate(zip(model.blocks, ratios)):
        block_masks = []
        for layer in block.layers:
            x = acts[i][layer.name] if needs else None
            s = score(metric, layer.weight, x)
            block_masks.append(layer_mask(s, float(r), granularity).bits)
        masks.append(block_masks)
    return model.with_masks(masks)
