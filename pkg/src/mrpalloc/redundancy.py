"""Non-outlier ratio (layer redundancy) and the layerwise redundancy vector."""

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .errors import AllocationExhaustedError, ConfigurationError, ValidationError
from .metrics import ScoreMatrix, get_metric, score


@dataclass(frozen=True)
class OutlierConfig:
    """``multiplier`` is the M in ``A_ij > M * mean(A)``.

    ``exclude_masked`` drops pruned weights from the population instead of
    counting them as zero scores; off by default.
    """

    multiplier: float = 5.0
    exclude_masked: bool = False

    def __post_init__(self):
        if not (np.isfinite(self.multiplier) and self.multiplier > 0):
            raise ValidationError(f"outlier multiplier must be > 0, got {self.multiplier}")


@dataclass(frozen=True)
class RedundancyProfile:
    values: np.ndarray
    metric_tag: str
    outlier_multiplier: float = 5.0

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 1 or v.size == 0:
            raise ValidationError("redundancy profile must be a non-empty vector")
        if ((v < 0) | (v > 1)).any():
            raise ValidationError(f"redundancy values must lie in [0, 1]: {v}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.size

    def to_dict(self):
        return {str(i): float(d) for i, d in enumerate(self.values)}


def layer_redundancy(scores, cfg: OutlierConfig = OutlierConfig(), mask=None) -> float:
    """Fraction of entries that are not outliers.

    ``scores`` may be a :class:`ScoreMatrix`, a 2-D array, or the flattened
    scores of several layers. ``mask`` (True = keep) only matters with
    ``cfg.exclude_masked``.
    """
    a = scores.values if isinstance(scores, ScoreMatrix) else np.asarray(scores, dtype=np.float64)
    a = a.ravel()
    if mask is not None and cfg.exclude_masked:
        a = a[np.asarray(mask, dtype=bool).ravel()]
    if a.size == 0:
        raise ValidationError("cannot compute redundancy of an empty score matrix")
    threshold = cfg.multiplier * a.mean()
    outliers = np.count_nonzero(a > threshold)
    return 1.0 - outliers / a.size


def block_scores(block, acts, metric):
    """Flattened scores and keep-mask over all linear layers of one block."""
    spec = get_metric(metric)
    parts, keeps = [], []
    for layer in block.layers:
        x = None
        if spec.needs_activations:
            x = acts[layer.name]
        parts.append(score(metric, layer.masked_weight(), x).values.ravel())
        keeps.append(layer.keep.ravel())
    return np.concatenate(parts), np.concatenate(keeps)


def block_redundancy(block, acts, metric, cfg: OutlierConfig = OutlierConfig()) -> float:
    s, keep = block_scores(block, acts, metric)
    return layer_redundancy(s, cfg, keep)


def model_lrl(model, acts, metric, cfg: OutlierConfig = OutlierConfig()) -> RedundancyProfile:
    """One redundancy value per block, pooled over the block's linear layers.

    ``acts`` is the per-block activation set from ``forward_collect`` (or
    ``None`` for metrics that ignore activations).
    """
    needs = get_metric(metric).needs_activations
    values = []
    for i, block in enumerate(model.blocks):
        block_acts = None
        if needs:
            if acts is None or i >= len(acts) or acts[i] is None:
                raise ConfigurationError(f"missing activations for block {i}")
            missing = [n for n in block.layer_names if n not in acts[i]]
            if missing:
                raise ConfigurationError(f"missing activations for block {i} layers {missing}")
            block_acts = acts[i]
        values.append(block_redundancy(block, block_acts, metric, cfg))
    return RedundancyProfile(np.array(values), str(metric), cfg.multiplier)


def _as_vector(p):
    v = p.values if isinstance(p, RedundancyProfile) else np.asarray(p, dtype=np.float64)
    if v.size == 0:
        raise ValidationError("empty redundancy profile")
    return v


def max_min_gap(p) -> float:
    v = _as_vector(p)
    return float(v.max() - v.min())


def select_most_redundant(p, frozen: Optional[Iterable[int]] = ()) -> int:
    """Argmax over non-frozen blocks; ties go to the lowest index."""
    v = _as_vector(p)
    frozen = set(frozen or ())
    best = None
    for i, d in enumerate(v):
        if i in frozen:
            continue
        if best is None or d > v[best]:
            best = i
    if best is None:
        raise AllocationExhaustedError("every block is frozen; nothing left to prune")
    return best
