"""Desk-scale block stack and the calibration forward pass.

Every block computes ``x + act(W_k ... act(W_1 x))`` (residual on) or the
bare chain (residual off). Weights follow the usual ``(C_out, C_in)`` layout,
so a batch ``X`` of shape ``(N, C_in)`` maps to ``X @ W.T``.
"""

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError, ValidationError
from .metrics import check_finite

NONLINEARITIES = {
    "relu": lambda z: np.maximum(z, 0.0),
    "identity": lambda z: z,
    "linear": lambda z: z,
    "tanh": np.tanh,
    "gelu": lambda z: 0.5 * z * (1.0 + np.tanh(0.7978845608028654 * (z + 0.044715 * z ** 3))),
}


def _readonly(a, dtype=None):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Layer:
    name: str
    weight: np.ndarray
    mask: Optional[np.ndarray] = None  # True = keep; None = dense

    def __post_init__(self):
        w = np.asarray(self.weight)
        if w.ndim != 2:
            raise ValidationError(f"layer {self.name!r}: weight must be 2-D, got {w.shape}")
        check_finite(w, f"layer {self.name!r} weights")
        if w.flags.writeable:
            object.__setattr__(self, "weight", _readonly(w))
        if self.mask is not None:
            m = np.asarray(self.mask, dtype=bool)
            if m.shape != w.shape:
                raise DimensionError(f"layer {self.name!r}: mask shape must match weights",
                                     m.shape, w.shape)
            object.__setattr__(self, "mask", _readonly(m))

    @property
    def shape(self):
        return self.weight.shape

    @property
    def size(self):
        return self.weight.size

    @property
    def keep(self):
        return np.ones(self.shape, dtype=bool) if self.mask is None else self.mask

    @property
    def n_masked(self):
        return 0 if self.mask is None else int(self.mask.size - np.count_nonzero(self.mask))

    def masked_weight(self):
        w = self.weight.astype(np.float64)
        if self.mask is None:
            return w
        return np.where(self.mask, w, 0.0)


@dataclass(frozen=True)
class Block:
    layers: tuple
    nonlinearity: str = "relu"
    residual: bool = True

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValidationError("a block needs at least one linear layer")
        if self.nonlinearity not in NONLINEARITIES:
            raise ValidationError(f"unknown nonlinearity {self.nonlinearity!r}; "
                                  f"known: {sorted(NONLINEARITIES)}")
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValidationError(f"duplicate layer names in block: {names}")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.shape[0] != b.shape[1]:
                raise DimensionError(f"layer {a.name!r} output does not feed {b.name!r}",
                                     a.shape, b.shape)
        if self.residual and self.layers[-1].shape[0] != self.layers[0].shape[1]:
            raise DimensionError("residual block must map d -> d",
                                 self.layers[0].shape, self.layers[-1].shape)

    @property
    def d_in(self):
        return self.layers[0].shape[1]

    @property
    def d_out(self):
        return self.layers[-1].shape[0]

    @property
    def size(self):
        return sum(l.size for l in self.layers)

    @property
    def layer_names(self):
        return [l.name for l in self.layers]

    def with_masks(self, masks):
        return replace(self, layers=tuple(replace(l, mask=m) for l, m in zip(self.layers, masks)))

    def run(self, x, collect=None):
        """Forward one block. If ``collect`` is a dict, it receives each layer's input."""
        act = NONLINEARITIES[self.nonlinearity]
        h = x
        for layer in self.layers:
            if collect is not None:
                collect[layer.name] = h
            h = act(h @ layer.masked_weight().T)
        return x + h if self.residual else h


@dataclass(frozen=True)
class BlockStack:
    blocks: tuple

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if not self.blocks:
            raise ValidationError("a model needs at least one block")
        for i, (a, b) in enumerate(zip(self.blocks, self.blocks[1:])):
            if a.d_out != b.d_in:
                raise DimensionError(f"block {i} output does not feed block {i + 1}",
                                     (a.d_out,), (b.d_in,))

    def __len__(self):
        return len(self.blocks)

    @property
    def d(self):
        return self.blocks[0].d_in

    @property
    def block_sizes(self):
        return np.array([b.size for b in self.blocks], dtype=np.int64)

    @property
    def total_size(self):
        return int(self.block_sizes.sum())

    def masks(self):
        return [[l.mask for l in b.layers] for b in self.blocks]

    def with_masks(self, masks):
        return BlockStack(tuple(b.with_masks(m) for b, m in zip(self.blocks, masks)))

    def with_block(self, index, block):
        blocks = list(self.blocks)
        blocks[index] = block
        return BlockStack(tuple(blocks))

    def dense(self):
        return self.with_masks([[None] * len(b.layers) for b in self.blocks])


@dataclass(frozen=True)
class CalibrationBatch:
    inputs: np.ndarray
    provenance: str = "external"

    def __post_init__(self):
        x = check_finite(self.inputs, "calibration inputs")
        object.__setattr__(self, "inputs", _readonly(x))

    @property
    def n(self):
        return self.inputs.shape[0]

    @property
    def width(self):
        return self.inputs.shape[1]


# Per block: {layer name: input activation matrix}
ActivationSet = List[Dict[str, np.ndarray]]


def _check_width(model, calib):
    if calib.width != model.d:
        raise ConfigurationError(f"calibration width {calib.width} does not match model "
                                 f"dimension {model.d}")


def forward_collect(model: BlockStack, calib: CalibrationBatch) -> ActivationSet:
    """Inputs seen by every linear layer of every block, with current masks applied.

    The first entry of each block's dict is the block input itself.
    """
    _check_width(model, calib)
    x = calib.inputs
    out = []
    for block in model.blocks:
        seen = {}
        x = block.run(x, collect=seen)
        out.append(seen)
    return out


def forward(model: BlockStack, calib: CalibrationBatch) -> np.ndarray:
    _check_width(model, calib)
    x = calib.inputs
    for block in model.blocks:
        x = block.run(x)
    return x


def block_inputs(acts: ActivationSet, model: BlockStack):
    """The activation matrix entering each block's first linear layer."""
    return [a[b.layers[0].name] for a, b in zip(acts, model.blocks)]


def expand_block_inputs(model: BlockStack, inputs: Sequence[np.ndarray]) -> ActivationSet:
    """Static-activation mode: derive per-layer inputs from per-block inputs."""
    if len(inputs) != len(model):
        raise ConfigurationError(f"got activations for {len(inputs)} blocks, model has {len(model)}")
    out = []
    for i, (block, x) in enumerate(zip(model.blocks, inputs)):
        x = check_finite(x, f"block {i} activations")
        if x.shape[1] != block.d_in:
            raise DimensionError(f"block {i} activations", x.shape, (x.shape[0], block.d_in))
        seen = {}
        block.run(x, collect=seen)
        out.append(seen)
    return out
