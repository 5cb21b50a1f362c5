"""Weight-importance scores: magnitude and Wanda.

Both metrics return a :class:`ScoreMatrix` in float64 regardless of the
weight dtype, since the outlier test compares entries against a mean taken
over every weight of a block.
"""

import enum
import hashlib
import threading
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Dict, Optional

import numpy as np

from .errors import DimensionError, ValidationError


class Metric(str, enum.Enum):
    MAGNITUDE = "magnitude"
    WANDA = "wanda"

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class ScoreMatrix:
    values: np.ndarray
    metric_tag: str

    @property
    def shape(self):
        return self.values.shape


def check_finite(a, what="array"):
    """Return ``a`` as a float64 2-D array or raise naming the first bad entry."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValidationError(f"{what} must be a non-empty 2-D array, got shape {arr.shape}")
    bad = ~np.isfinite(arr)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValidationError(f"{what} has non-finite entry at index {idx}")
    return arr


def score_magnitude(w, x=None):
    w = check_finite(w, "weights")
    return ScoreMatrix(np.abs(w), Metric.MAGNITUDE.value)


_norm_cache = OrderedDict()
_norm_lock = threading.Lock()
_NORM_CACHE_SIZE = 256


def column_norms(x):
    """l2 norm of every column of ``x``, cached by content hash."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    key = (x.shape, hashlib.sha1(x.tobytes()).hexdigest())
    with _norm_lock:
        hit = _norm_cache.get(key)
        if hit is not None:
            _norm_cache.move_to_end(key)
            return hit
    norms = np.sqrt(np.einsum("ij,ij->j", x, x))
    norms.setflags(write=False)
    with _norm_lock:
        _norm_cache[key] = norms
        while len(_norm_cache) > _NORM_CACHE_SIZE:
            _norm_cache.popitem(last=False)
    return norms


def clear_norm_cache():
    with _norm_lock:
        _norm_cache.clear()


def score_wanda(w, x):
    """Score ``|W_ij| * ||X_j||_2`` where ``X_j`` is input column ``j``."""
    w = check_finite(w, "weights")
    x = check_finite(x, "activations")
    if x.shape[1] != w.shape[1]:
        raise DimensionError("activation columns must equal weight input channels",
                             x.shape, w.shape)
    return ScoreMatrix(np.abs(w) * column_norms(x)[None, :], Metric.WANDA.value)


@dataclass(frozen=True)
class MetricSpec:
    name: str
    fn: Callable
    needs_activations: bool


_REGISTRY: Dict[str, MetricSpec] = {}


def register_metric(name, fn, needs_activations=True):
    """Make ``fn(weights, activations) -> ScoreMatrix`` available under ``name``."""
    _REGISTRY[str(name)] = MetricSpec(str(name), fn, needs_activations)


def get_metric(name) -> MetricSpec:
    try:
        return _REGISTRY[str(name)]
    except KeyError:
        raise ValidationError(f"unknown metric {name!r}; known: {sorted(_REGISTRY)}") from None


def available_metrics():
    return sorted(_REGISTRY)


def score(metric, w, x: Optional[np.ndarray] = None) -> ScoreMatrix:
    spec = get_metric(metric)
    if spec.needs_activations and x is None:
        raise ValidationError(f"metric {spec.name!r} needs activations")
    return spec.fn(w, x)


register_metric(Metric.MAGNITUDE, score_magnitude, needs_activations=False)
register_metric(Metric.WANDA, score_wanda, needs_activations=True)
