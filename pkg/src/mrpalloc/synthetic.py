"""Deterministic desk-scale models and calibration batches.

Random streams come from numpy's counter-based Philox generator keyed by a
``SeedSequence`` of ``(seed, block, layer)`` for weights and ``(seed, N, d)``
for calibration data. Base entries are standard normal; weights are scaled
by ``1/sqrt(C_in)`` after outliers are injected.
"""

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ValidationError
from .propagation import Block, BlockStack, CalibrationBatch, Layer


def _rng(*key):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key))))


@dataclass(frozen=True)
class OutlierSpec:
    """Per-block outlier injection: a fraction of entries multiplied by a scale."""

    fractions: tuple
    scales: tuple

    def __post_init__(self):
        f = tuple(float(x) for x in self.fractions)
        s = tuple(float(x) for x in self.scales)
        if len(f) != len(s):
            raise ValidationError("outlier fractions and scales need one entry per block")
        if any(not 0.0 <= x <= 1.0 for x in f):
            raise ValidationError(f"outlier fractions must lie in [0, 1]: {f}")
        if any(not x >= 1.0 for x in s):
            raise ValidationError(f"outlier scales must be >= 1: {s}")
        object.__setattr__(self, "fractions", f)
        object.__setattr__(self, "scales", s)

    @classmethod
    def uniform(cls, blocks, fraction=0.0, scale=1.0):
        return cls((fraction,) * blocks, (scale,) * blocks)

    def __len__(self):
        return len(self.fractions)


def gen_model(seed: int, L: int, d: int, spec: Optional[OutlierSpec] = None,
              hidden: Optional[int] = None, nonlinearity="relu", residual=True,
              layer_names: Sequence[str] = ("fc1", "fc2")) -> BlockStack:
    """Residual MLP stack ``x + act(W2 act(W1 x))`` with optional per-block outliers."""
    if L < 1 or d < 2:
        raise ValidationError(f"need L >= 1 and d >= 2, got L={L}, d={d}")
    spec = spec if spec is not None else OutlierSpec.uniform(L)
    if len(spec) != L:
        raise ValidationError(f"outlier spec covers {len(spec)} blocks, model has {L}")
    hidden = hidden or d
    if len(layer_names) < 1:
        raise ValidationError("need at least one layer per block")
    dims = [d] + [hidden] * (len(layer_names) - 1) + [d]
    blocks = []
    for b in range(L):
        layers = []
        for j, name in enumerate(layer_names):
            c_in, c_out = dims[j], dims[j + 1]
            rng = _rng(seed, b, j)
            w = rng.standard_normal((c_out, c_in))
            k = int(round(spec.fractions[b] * w.size))
            if k and spec.scales[b] != 1.0:
                idx = rng.choice(w.size, size=k, replace=False)
                w.reshape(-1)[idx] *= spec.scales[b]
            layers.append(Layer(name, w / np.sqrt(c_in)))
        blocks.append(Block(tuple(layers), nonlinearity, residual))
    return BlockStack(tuple(blocks))


def gen_calibration(seed: int, N: int, d: int, skew=None) -> CalibrationBatch:
    """``N x d`` standard-normal batch with column ``j`` multiplied by ``skew[j]``."""
    if N < 1 or d < 1:
        raise ValidationError(f"need N >= 1 and d >= 1, got N={N}, d={d}")
    x = _rng(seed, N, d).standard_normal((N, d))
    if skew is not None:
        skew = np.asarray(skew, dtype=np.float64)
        if skew.shape != (d,):
            raise ValidationError(f"skew must have length {d}, got {skew.shape}")
        if not (np.isfinite(skew).all() and (skew > 0).all()):
            raise ValidationError("skew entries must be finite and positive")
        x = x * skew[None, :]
    return CalibrationBatch(x, provenance=f"synthetic(seed={seed}, N={N}, d={d})")


def log_uniform_skew(seed: int, d: int, spread: float = 10.0):
    """Skew vector with entries log-uniform in ``[1, spread]``."""
    if spread < 1:
        raise ValidationError("spread must be >= 1")
    return np.exp(_rng(seed, d, 7).uniform(0.0, np.log(spread), size=d))
