"""Persistence: safetensors models/activations, mask bitsets, JSON and CSV reports.

Tensor naming: ``block.{i}.{layer}.weight`` for weights, ``block.{i}.input``
for precomputed block inputs, ``calibration`` for a calibration batch.

Mask payload (``masks.bin``): for every layer in block-then-layer order, the
row-major keep bits (1 = keep, 0 = pruned) packed eight per byte,
least-significant bit first. Each layer starts on a fresh byte; offsets and
sizes are listed in ``masks.json``.
"""

import csv
import io as _io
import json
import logging
import os
import re
import warnings

import numpy as np
from safetensors import SafetensorError, safe_open
from safetensors.numpy import save_file

from .errors import LoadError, MrpError, StorageError
from .propagation import Block, BlockStack, CalibrationBatch, Layer

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
_WEIGHT_RE = re.compile(r"block\.(\d+)\.(.+)\.weight")
_INPUT_RE = re.compile(r"block\.(\d+)\.input")
_FLOAT_DTYPES = (np.float16, np.float32, np.float64)


# -- formatting ---------------------------------------------------------------

def fmt_float(x) -> str:
    return format(float(x), ".9g")


def _canonical(obj):
    if isinstance(obj, (float, np.floating)):
        return float(fmt_float(obj))
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return [_canonical(v) for v in obj.tolist()]
    if isinstance(obj, dict):
        return {str(k): _canonical(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    return obj


def dumps_json(obj) -> str:
    """Canonical JSON: sorted keys, floats at 9 significant digits."""
    return json.dumps(_canonical(obj), sort_keys=True, indent=2) + "\n"


def _write_text(path, text):
    try:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def write_json(path, obj):
    _write_text(path, dumps_json(obj))


def read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise LoadError(f"{path} is not valid JSON: {exc}") from exc


def write_csv(path, header, rows):
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt_float(v) if isinstance(v, (float, np.floating)) else v for v in row])
    _write_text(path, buf.getvalue())


def read_profile_csv(path):
    """Read a ``block,value`` CSV back into a vector ordered by block."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    if not rows or len(rows[0]) != 2:
        raise LoadError(f"{path}: expected a two-column CSV with a header")
    try:
        data = sorted((int(b), float(v)) for b, v in rows[1:])
    except ValueError as exc:
        raise LoadError(f"{path}: {exc}") from exc
    return np.array([v for _, v in data])


# -- tensors ------------------------------------------------------------------

def _load_tensors(path):
    if not os.path.exists(path):
        raise LoadError(f"no such file: {path}")
    try:
        with safe_open(path, framework="np") as f:
            meta = f.metadata() or {}
            tensors = {k: f.get_tensor(k) for k in f.keys()}
    except (SafetensorError, OSError, TypeError) as exc:
        raise LoadError(f"cannot read tensor file {path}: {exc}") from exc
    return tensors, meta


def _save_tensors(tensors, path, meta):
    try:
        save_file({k: np.ascontiguousarray(v) for k, v in tensors.items()}, path,
                  metadata={k: str(v) for k, v in meta.items()})
    except (OSError, SafetensorError) as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def export_model(model: BlockStack, path, apply_masks=False):
    """Write weights as ``block.{i}.{layer}.weight``; architecture goes in the header."""
    tensors = {}
    for i, block in enumerate(model.blocks):
        for layer in block.layers:
            w = layer.masked_weight().astype(layer.weight.dtype) if apply_masks else layer.weight
            tensors[f"block.{i}.{layer.name}.weight"] = w
    meta = {
        "format": "mrpalloc",
        "blocks": len(model),
        "layers": json.dumps([b.layer_names for b in model.blocks]),
        "nonlinearity": json.dumps([b.nonlinearity for b in model.blocks]),
        "residual": json.dumps([b.residual for b in model.blocks]),
    }
    _save_tensors(tensors, path, meta)


def import_model(path, remap=None, nonlinearity="relu", residual=True) -> BlockStack:
    """Load a model saved with the ``block.{i}.{layer}.weight`` scheme.

    ``remap`` maps source tensor names to canonical names (a dict or the path
    of a JSON file). Unrelated tensors are ignored with a warning.
    """
    tensors, meta = _load_tensors(path)
    if isinstance(remap, (str, os.PathLike)):
        remap = read_json(remap)
    if remap:
        tensors = {remap.get(k, k): v for k, v in tensors.items()}

    found, extra = {}, []
    for name, t in tensors.items():
        m = _WEIGHT_RE.fullmatch(name)
        if not m:
            extra.append(name)
            continue
        found.setdefault(int(m.group(1)), {})[m.group(2)] = t
    if extra:
        msg = f"{path}: ignoring unrelated tensors {sorted(extra)}"
        logger.warning(msg)
        warnings.warn(msg, stacklevel=2)
    if not found:
        raise LoadError(f"{path}: no tensors named block.{{i}}.{{layer}}.weight")

    n_blocks = int(meta.get("blocks", max(found) + 1))
    missing = [i for i in range(n_blocks) if i not in found]
    if missing:
        raise LoadError(f"{path}: missing tensors for block.{missing[0]} "
                        f"(blocks {missing} of {n_blocks})")
    order = json.loads(meta["layers"]) if "layers" in meta else None
    acts = json.loads(meta["nonlinearity"]) if "nonlinearity" in meta else [nonlinearity] * n_blocks
    resid = json.loads(meta["residual"]) if "residual" in meta else [residual] * n_blocks

    blocks = []
    for i in range(n_blocks):
        names = order[i] if order else sorted(found[i])
        layers = []
        for name in names:
            if name not in found[i]:
                raise LoadError(f"{path}: missing tensor block.{i}.{name}.weight")
            w = found[i][name]
            if w.dtype.type not in _FLOAT_DTYPES:
                raise LoadError(f"{path}: block.{i}.{name}.weight has unsupported dtype {w.dtype}")
            layers.append(Layer(name, w))
        try:
            blocks.append(Block(tuple(layers), acts[i], bool(resid[i])))
        except MrpError as exc:
            raise LoadError(f"{path}: block.{i} is inconsistent: {exc}") from exc
    try:
        return BlockStack(tuple(blocks))
    except MrpError as exc:
        raise LoadError(f"{path}: {exc}") from exc


def export_calibration(calib: CalibrationBatch, path):
    _save_tensors({"calibration": calib.inputs}, path, {"provenance": calib.provenance})


def import_calibration(path) -> CalibrationBatch:
    tensors, meta = _load_tensors(path)
    if "calibration" in tensors:
        x = tensors["calibration"]
    elif len(tensors) == 1:
        x = next(iter(tensors.values()))
    else:
        raise LoadError(f"{path}: expected a tensor named 'calibration'")
    return CalibrationBatch(x.astype(np.float64), meta.get("provenance", f"file:{path}"))


def export_activations(inputs, path):
    """Store per-block input activations as ``block.{i}.input``."""
    _save_tensors({f"block.{i}.input": np.asarray(x) for i, x in enumerate(inputs)}, path,
                  {"blocks": len(inputs)})


def import_activations(path, n_blocks=None):
    tensors, meta = _load_tensors(path)
    found = {}
    for name, t in tensors.items():
        m = _INPUT_RE.fullmatch(name)
        if m:
            found[int(m.group(1))] = t.astype(np.float64)
    n = n_blocks or int(meta.get("blocks", max(found, default=-1) + 1))
    missing = [i for i in range(n) if i not in found]
    if missing:
        raise LoadError(f"{path}: missing activations for block.{missing[0]}")
    return [found[i] for i in range(n)]


# -- masks --------------------------------------------------------------------

def export_masks(model: BlockStack, bin_path, json_path, plan=None, granularity="unstructured",
                 extra=None):
    chunks, entries, offset = [], [], 0
    for i, block in enumerate(model.blocks):
        for layer in block.layers:
            packed = np.packbits(layer.keep.ravel(), bitorder="little")
            chunks.append(packed.tobytes())
            entries.append({"name": f"block.{i}.{layer.name}", "shape": list(layer.shape),
                            "offset": offset, "nbytes": int(packed.size),
                            "n_masked": layer.n_masked})
            offset += packed.size
    try:
        with open(bin_path, "wb") as fh:
            fh.write(b"".join(chunks))
    except OSError as exc:
        raise StorageError(f"cannot write {bin_path}: {exc}") from exc
    header = {
        "schema": f"mrpalloc.masks/{SCHEMA_VERSION}",
        "bit_order": "little",
        "keep_bit": 1,
        "granularity": str(granularity),
        "layers": entries,
        "plan": None if plan is None else plan.to_dict(),
        **(extra or {}),
    }
    write_json(json_path, header)


def import_masks(bin_path, json_path):
    """Return ``{"block.i.layer": bool array}`` from an exported mask pair."""
    header = read_json(json_path)
    try:
        with open(bin_path, "rb") as fh:
            payload = np.frombuffer(fh.read(), dtype=np.uint8)
    except OSError as exc:
        raise LoadError(f"cannot read {bin_path}: {exc}") from exc
    out = {}
    for e in header["layers"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        n = int(np.prod(e["shape"]))
        if raw.size * 8 < n:
            raise LoadError(f"{bin_path}: truncated mask for {e['name']}")
        out[e["name"]] = np.unpackbits(raw, bitorder="little", count=n).astype(bool).reshape(e["shape"])
    return out


def apply_mask_file(model: BlockStack, masks) -> BlockStack:
    return model.with_masks([[masks.get(f"block.{i}.{l.name}") for l in b.layers]
                             for i, b in enumerate(model.blocks)])


# -- reports ------------------------------------------------------------------

def export_report(path, plan=None, trace=None, lrl=None, lps=None, model=None,
                  granularity="unstructured"):
    """Write the run artefacts into directory ``path``; returns the written file names."""
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"cannot create {path}: {exc}") from exc
    written = []
    if plan is not None:
        write_json(os.path.join(path, "plan.json"),
                   {"schema": f"mrpalloc.plan/{SCHEMA_VERSION}", **plan.to_dict()})
        written.append("plan.json")
        if trace is None:
            body = {"initial_global_sparsity": None, "iterations": [], "final_lrl": None,
                    "plan": plan.to_dict()}
        else:
            body = trace.to_dict()
        write_json(os.path.join(path, "trace.json"),
                   {"schema": f"mrpalloc.trace/{SCHEMA_VERSION}", **body})
        written.append("trace.json")
    if lrl is not None:
        values = getattr(lrl, "values", lrl)
        write_csv(os.path.join(path, "lrl.csv"), ["block", "redundancy"],
                  [(i, float(v)) for i, v in enumerate(values)])
        written.append("lrl.csv")
    if lps is not None:
        values = getattr(lps, "values", lps)
        write_csv(os.path.join(path, "lps.csv"), ["block", "sensitivity"],
                  [(i, float(v)) for i, v in enumerate(values)])
        written.append("lps.csv")
    if model is not None:
        export_masks(model, os.path.join(path, "masks.bin"), os.path.join(path, "masks.json"),
                     plan, granularity)
        written += ["masks.bin", "masks.json"]
    return written
