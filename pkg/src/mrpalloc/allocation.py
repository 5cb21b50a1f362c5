"""Layerwise sparsity allocators: MRP and the Uniform / Global / ER / OWL baselines."""

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .errors import InfeasibleError, ValidationError
from .metrics import get_metric, score
from .propagation import BlockStack, CalibrationBatch, expand_block_inputs, forward_collect
from .pruning import mask_unstructured
from .redundancy import (OutlierConfig, RedundancyProfile, block_redundancy, model_lrl,
                         select_most_redundant)

logger = logging.getLogger(__name__)

# (r, s0, s_min, alpha) per model, as used for the published LLaMA/OPT runs.
PRESETS = {
    "llama2-7b": (0.50, 0.20, 0.05, 0.95),
    "llama2-13b": (0.55, 0.20, 0.05, 0.95),
    "llama2-70b": (0.65, 0.06, 0.03, 0.95),
    "llama3-8b": (0.60, 0.15, 0.05, 0.95),
    "opt-6.7b": (0.55, 0.10, 0.05, 0.95),
}

_CAP_EPS = 1e-12


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class SparsityPlan:
    ratios: np.ndarray
    granularity: str = "unstructured"
    metric_tag: Optional[str] = None
    allocator: str = ""
    config_hash: str = ""

    def __post_init__(self):
        r = np.array(self.ratios, dtype=np.float64)
        if r.ndim != 1 or r.size == 0:
            raise ValidationError("a plan needs one ratio per block")
        if not np.isfinite(r).all() or ((r < 0) | (r > 1)).any():
            raise ValidationError(f"plan ratios must lie in [0, 1]: {r}")
        r.setflags(write=False)
        object.__setattr__(self, "ratios", r)

    def __len__(self):
        return self.ratios.size

    def global_ratio(self, block_sizes=None) -> float:
        return weighted_mean(self.ratios, block_sizes)

    def to_dict(self):
        return {
            "allocator": self.allocator,
            "config_hash": self.config_hash,
            "granularity": self.granularity,
            "metric": self.metric_tag,
            "ratios": [float(x) for x in self.ratios],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["ratios"], dtype=np.float64), d.get("granularity", "unstructured"),
                   d.get("metric"), d.get("allocator", ""), d.get("config_hash", ""))


def weighted_mean(values, weights=None) -> float:
    v = np.asarray(values, dtype=np.float64)
    if weights is None:
        return float(v.mean())
    w = np.asarray(weights, dtype=np.float64)
    return float((v * w).sum() / w.sum())


def _check_target(r, upper_open=False):
    ok = 0.0 <= r < 1.0 if upper_open else 0.0 <= r <= 1.0
    if not ok:
        raise ValidationError(f"target ratio {r} out of range")


def _recenter(ratios, weights, target):
    """Shift ``ratios`` by one constant (clipped to [0, 1]) so the weighted mean hits ``target``."""
    w = np.asarray(weights, dtype=np.float64)
    w = w / w.sum()

    def mean_at(c):
        return float((np.clip(ratios + c, 0.0, 1.0) * w).sum())

    lo, hi = -1.0 - ratios.max(), 1.0 - ratios.min() + 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mean_at(mid) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-16:
            break
    c = hi if abs(mean_at(hi) - target) <= abs(mean_at(lo) - target) else lo
    return np.clip(ratios + c, 0.0, 1.0)


def allocate_uniform(block_count: int, r: float) -> SparsityPlan:
    if block_count < 1:
        raise ValidationError("block_count must be >= 1")
    _check_target(r)
    return SparsityPlan(np.full(block_count, float(r)), allocator="uniform",
                        config_hash=config_hash({"r": r, "L": block_count}))


def _block_dims(dims):
    """Normalise ``(C_out, C_in)`` or a list of those into (params, fan sum)."""
    if len(dims) == 2 and all(np.isscalar(x) for x in dims):
        dims = [dims]
    params = fan = 0
    for c_out, c_in in dims:
        if c_out < 1 or c_in < 1:
            raise ValidationError(f"layer dimensions must be positive, got {(c_out, c_in)}")
        params += c_out * c_in
        fan += c_out + c_in
    return params, fan


def allocate_er(block_dims, r: float) -> SparsityPlan:
    """Erdos-Renyi densities ``eps * (C_in + C_out) / (C_in * C_out)``.

    ``eps`` is chosen so the parameter-weighted density equals ``1 - r``;
    blocks whose density would exceed 1 are clamped and the rest rescaled.
    """
    _check_target(r, upper_open=True)
    params, fan = map(np.array, zip(*(_block_dims(d) for d in block_dims)))
    params = params.astype(np.float64)
    kernel = fan / params
    keep_target = (1.0 - r) * params.sum()
    dense = np.zeros(len(params), dtype=bool)
    while True:
        active = ~dense
        budget = keep_target - params[dense].sum()
        if not active.any():
            break
        eps = budget / (params[active] * kernel[active]).sum()
        newly = active & (eps * kernel >= 1.0)
        if not newly.any():
            break
        dense |= newly
    density = np.where(dense, 1.0, eps * kernel if active.any() else 1.0)
    if abs((density * params).sum() - keep_target) > 1e-9 * params.sum():
        raise InfeasibleError(f"ER allocation cannot reach target sparsity {r}")
    ratios = np.clip(1.0 - density, 0.0, 1.0)
    return SparsityPlan(ratios, allocator="er",
                        config_hash=config_hash({"r": r, "dims": np.asarray(params).tolist(),
                                                 "fan": np.asarray(fan).tolist()}))


def allocate_owl(lrl_dense, r: float, lam: float = 0.1, block_sizes=None) -> SparsityPlan:
    """Map dense-model redundancy linearly onto ``[r - lam, r + lam]``.

    Higher redundancy means higher sparsity. The band is then shifted so the
    weighted mean sparsity equals ``r``.
    """
    _check_target(r)
    if not 0.0 <= lam <= min(r, 1.0 - r) + 1e-15:
        raise ValidationError(f"lambda must lie in [0, min(r, 1-r)] = [0, {min(r, 1 - r)}], got {lam}")
    d = np.asarray(getattr(lrl_dense, "values", lrl_dense), dtype=np.float64)
    sizes = np.ones(d.size) if block_sizes is None else np.asarray(block_sizes, dtype=np.float64)
    if sizes.shape != d.shape:
        raise ValidationError("block_sizes must have one entry per block")
    spread = d.max() - d.min()
    if spread == 0 or lam == 0:
        ratios = np.full(d.size, float(r))
    else:
        ratios = (r - lam) + 2.0 * lam * (d - d.min()) / spread
        ratios = _recenter(ratios, sizes, r)
    return SparsityPlan(ratios, metric_tag=getattr(lrl_dense, "metric_tag", None), allocator="owl",
                        config_hash=config_hash({"r": r, "lambda": lam, "lrl": d.tolist()}))


def allocate_global(model: BlockStack, acts, metric, r: float) -> SparsityPlan:
    """Prune the globally lowest ``r`` fraction of scores and report per-block ratios.

    Ties resolve by (score, block index, flat index within block).
    """
    _check_target(r, upper_open=True)
    needs = get_metric(metric).needs_activations
    scores, blocks, flats = [], [], []
    for i, block in enumerate(model.blocks):
        parts = [score(metric, l.masked_weight(), acts[i][l.name] if needs else None).values.ravel()
                 for l in block.layers]
        s = np.concatenate(parts)
        scores.append(s)
        blocks.append(np.full(s.size, i))
        flats.append(np.arange(s.size))
    s, b, f = (np.concatenate(a) for a in (scores, blocks, flats))
    k = min(s.size, int(math.floor(r * s.size + 1e-9)))
    order = np.lexsort((f, b, s))
    removed = np.bincount(b[order[:k]], minlength=len(model))
    ratios = removed / model.block_sizes
    return SparsityPlan(ratios, metric_tag=str(metric), allocator="global",
                        config_hash=config_hash({"r": r}))


def measure_global_sparsity(model: BlockStack) -> float:
    masked = sum(l.n_masked for b in model.blocks for l in b.layers)
    return masked / model.total_size


def block_sparsity(model: BlockStack):
    return np.array([sum(l.n_masked for l in b.layers) / b.size for b in model.blocks])


@dataclass(frozen=True)
class MrpConfig:
    initial_ratio: float = 0.50
    target_ratio: float = 0.70
    initial_step: float = 0.20
    min_step: float = 0.05
    decay: float = 0.95
    outlier: OutlierConfig = field(default_factory=OutlierConfig)
    max_ratio_cap: float = 0.99
    refresh_activations: bool = True
    pooled_blocks: bool = True

    def __post_init__(self):
        if isinstance(self.outlier, dict):
            object.__setattr__(self, "outlier", OutlierConfig(**self.outlier))
        r, rt, cap = self.initial_ratio, self.target_ratio, self.max_ratio_cap
        if not 0.0 <= r < 1.0:
            raise ValidationError(f"initial ratio must lie in [0, 1), got {r}")
        if not r <= rt < 1.0:
            raise ValidationError(f"target ratio must lie in [initial ratio, 1), got {rt}")
        if not rt <= cap <= 1.0 or not (cap > rt or rt == r):
            raise ValidationError(f"max_ratio_cap must lie in (target, 1], got {cap}")
        if not self.min_step > 0:
            raise ValidationError("min_step must be > 0, otherwise the loop may never converge")
        if not self.min_step <= self.initial_step:
            raise ValidationError("min_step must not exceed initial_step")
        if not 0.0 < self.decay <= 1.0:
            raise ValidationError(f"decay must lie in (0, 1], got {self.decay}")

    @classmethod
    def preset(cls, name, **overrides):
        try:
            r, s0, smin, alpha = PRESETS[name.lower()]
        except KeyError:
            raise ValidationError(f"unknown preset {name!r}; known: {sorted(PRESETS)}") from None
        kw = dict(initial_ratio=r, initial_step=s0, min_step=smin, decay=alpha)
        kw.update(overrides)
        return cls(**kw)

    def to_dict(self):
        return asdict(self)

    def max_iterations(self, block_count):
        return int(block_count * (self.max_ratio_cap - self.initial_ratio) / self.min_step) + 1


@dataclass(frozen=True)
class MrpStep:
    iteration: int
    block: int
    step: float            # step size in effect for this iteration
    applied: float         # ratio increase actually applied (smaller at the cap)
    lrl: tuple             # redundancy before pruning
    lrl_after: tuple       # same vector with the selected block re-measured after pruning
    global_sparsity: float


@dataclass
class MrpTrace:
    steps: List[MrpStep]
    plan: SparsityPlan
    initial_sparsity: float = 0.0
    final_lrl: Optional[RedundancyProfile] = None

    def __len__(self):
        return len(self.steps)

    def to_dict(self):
        return {
            "initial_global_sparsity": self.initial_sparsity,
            "iterations": [
                {"iteration": s.iteration, "block": s.block, "step": s.step,
                 "applied": s.applied, "lrl": list(s.lrl), "lrl_after": list(s.lrl_after),
                 "global_sparsity": s.global_sparsity}
                for s in self.steps
            ],
            "final_lrl": None if self.final_lrl is None else list(map(float, self.final_lrl.values)),
            "plan": self.plan.to_dict(),
        }


@dataclass
class MrpResult:
    plan: SparsityPlan
    trace: MrpTrace
    model: BlockStack


def _static_acts(model, activations):
    if activations is None:
        return None
    if isinstance(activations[0], dict):
        return activations
    return expand_block_inputs(model, activations)


def _extend_block(block, acts, metric, ratio, pooled=True):
    """Raise a block's sparsity to ``ratio`` without reviving pruned weights.

    With ``pooled`` the victims are the lowest scores across all the block's
    layers (one population, as in the redundancy measure); otherwise each
    layer is extended to ``ratio`` on its own.
    """
    needs = get_metric(metric).needs_activations
    scores = [score(metric, l.masked_weight(), acts[l.name] if needs else None).values
              for l in block.layers]
    if not pooled:
        return block.with_masks([mask_unstructured(s, ratio, l.keep).bits
                                 for s, l in zip(scores, block.layers)])
    flat = np.concatenate([s.ravel() for s in scores])[None, :]
    prior = np.concatenate([l.keep.ravel() for l in block.layers])[None, :]
    keep = mask_unstructured(flat, ratio, prior).bits.ravel()
    bounds = np.cumsum([0] + [l.size for l in block.layers])
    return block.with_masks([keep[a:b].reshape(l.shape)
                             for a, b, l in zip(bounds, bounds[1:], block.layers)])


def run_mrp(model: BlockStack, calib: Optional[CalibrationBatch], metric,
            cfg: MrpConfig = MrpConfig(), activations=None, callback=None) -> MrpResult:
    """Maximum Redundancy Pruning.

    Uniformly pre-prunes every block to ``cfg.initial_ratio``, then repeatedly
    adds ``step`` sparsity to the block with the highest non-outlier ratio
    until global sparsity reaches ``cfg.target_ratio``. The step decays by
    ``cfg.decay`` after every action, never below ``cfg.min_step``.

    Pass ``activations`` (per-block inputs or per-layer dicts) instead of
    ``calib`` to run in static-activation mode: scores are still recomputed
    on the masked weights each iteration but inputs are never refreshed.

    ``callback(step, model)`` is invoked after every iteration.
    """
    needs = get_metric(metric).needs_activations
    static = _static_acts(model, activations)
    refresh = cfg.refresh_activations and calib is not None
    if calib is None and static is None and needs:
        raise ValidationError(f"metric {metric!s} needs a calibration batch or activations")

    current = model.dense()
    if static is not None:
        acts0 = static
    elif calib is not None:
        acts0 = forward_collect(current, calib)
    else:
        acts0 = [None] * len(model)

    L = len(model)
    sizes = model.block_sizes
    ratios = np.full(L, cfg.initial_ratio)
    current = BlockStack(tuple(_extend_block(b, a, metric, cfg.initial_ratio, cfg.pooled_blocks)
                               for b, a in zip(current.blocks, acts0)))
    r_c = measure_global_sparsity(current)
    initial = r_c
    s = cfg.initial_step
    steps = []
    limit = cfg.max_iterations(L) + L
    # r == r_T: the uniform pre-prune is the answer, rounding aside.
    while r_c < cfg.target_ratio and cfg.target_ratio > cfg.initial_ratio:
        if len(steps) > limit:
            raise InfeasibleError("MRP exceeded its iteration bound", r_c)
        acts = forward_collect(current, calib) if refresh else acts0
        lrl = model_lrl(current, acts, metric, cfg.outlier)
        frozen = {i for i in range(L) if ratios[i] >= cfg.max_ratio_cap - _CAP_EPS}
        if len(frozen) == L:
            raise InfeasibleError(f"all blocks reached the {cfg.max_ratio_cap} cap before "
                                  f"target {cfg.target_ratio}", r_c)
        i = select_most_redundant(lrl, frozen)
        new_ratio = min(ratios[i] + s, cfg.max_ratio_cap)
        block = _extend_block(current.blocks[i], acts[i], metric, new_ratio, cfg.pooled_blocks)
        after = lrl.values.copy()
        after[i] = block_redundancy(block, acts[i], metric, cfg.outlier)
        applied = new_ratio - ratios[i]
        ratios[i] = new_ratio
        current = current.with_block(i, block)
        r_c = measure_global_sparsity(current)
        steps.append(MrpStep(len(steps), int(i), float(s), float(applied),
                             tuple(map(float, lrl.values)), tuple(map(float, after)), r_c))
        if callback is not None:
            callback(steps[-1], current)
        logger.debug("iter %d: block %d -> %.4f (step %.4f), global %.4f",
                     len(steps) - 1, i, new_ratio, s, r_c)
        s = max(s * cfg.decay, cfg.min_step)

    acts = forward_collect(current, calib) if refresh else acts0
    final_lrl = model_lrl(current, acts, metric, cfg.outlier)
    plan = SparsityPlan(ratios, metric_tag=str(metric), allocator="mrp",
                        config_hash=config_hash(cfg.to_dict()))
    trace = MrpTrace(steps, plan, initial, final_lrl)
    return MrpResult(plan, trace, current)


def allocate_mrp(model: BlockStack, calib: Optional[CalibrationBatch], metric,
                 cfg: MrpConfig = MrpConfig(), activations=None) -> Tuple[SparsityPlan, MrpTrace]:
    res = run_mrp(model, calib, metric, cfg, activations)
    return res.plan, res.trace
