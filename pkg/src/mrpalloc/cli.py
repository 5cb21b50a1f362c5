"""Command line interface.

    mrpalloc synth    --out model.safetensors --calib-out calib.safetensors
    mrpalloc allocate --model model.safetensors --allocator mrp --target 0.7 --out run/
    mrpalloc prune    --model model.safetensors --plan run/plan.json --out run/
    mrpalloc lrl      --model model.safetensors --out run/
    mrpalloc lps      --model model.safetensors --probe-ratio 0.7 --out run/
    mrpalloc reversal a/lps.csv b/lps.csv
    mrpalloc shift    --model model.safetensors --prefix-plan 0.7,0,0,0 --out run/
    mrpalloc report   --config run.json --out run/

Without ``--model`` a synthetic model is generated from the synth flags.
Flags override values from ``--config``. Exit codes: 0 ok, 2 validation
error, 3 infeasible allocation, 4 I/O error.
"""

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import io as mio
from .allocation import (MrpConfig, SparsityPlan, allocate_er, allocate_global, allocate_owl,
                         allocate_uniform, measure_global_sparsity, run_mrp)
from .analysis import CommandEvaluator, OutputDistance, outlier_shift, profile_lps, reversal_rate
from .errors import ConfigurationError, MrpError, ValidationError
from .metrics import available_metrics, get_metric
from .propagation import expand_block_inputs, forward_collect
from .pruning import Granularity, apply_plan, effective_ratios
from .redundancy import OutlierConfig, max_min_gap, model_lrl
from .synthetic import OutlierSpec, gen_calibration, gen_model, log_uniform_skew

logger = logging.getLogger("mrpalloc")

ALLOCATORS = ("mrp", "uniform", "global", "er", "owl")


@dataclass
class RunConfig:
    model: Optional[str] = None
    remap: Optional[str] = None
    calib: Optional[str] = None
    activations: Optional[str] = None
    seed: int = 0
    blocks: int = 6
    dim: int = 64
    hidden: Optional[int] = None
    outlier_fractions: List[float] = field(default_factory=lambda: [0.10, 0.0, 0.20, 0.05, 0.15, 0.25])
    outlier_scales: List[float] = field(default_factory=lambda: [5.0] * 6)
    calib_n: int = 128
    skew_spread: float = 1.0
    metric: str = "wanda"
    allocator: str = "mrp"
    target: float = 0.7
    initial_ratio: float = 0.5
    initial_step: float = 0.2
    min_step: float = 0.05
    decay: float = 0.95
    max_ratio_cap: float = 0.99
    refresh_activations: bool = True
    preset: Optional[str] = None
    owl_lambda: float = 0.1
    outlier_multiplier: float = 5.0
    granularity: str = "unstructured"
    probe_ratio: float = 0.7
    evaluator: Optional[str] = None
    out: str = "mrp-out"

    def validate(self):
        for p in (self.model, self.calib, self.activations, self.remap):
            if p is not None and not os.path.exists(p):
                raise ConfigurationError(f"path does not exist: {p}")
        get_metric(self.metric)
        if self.allocator not in ALLOCATORS:
            raise ValidationError(f"unknown allocator {self.allocator!r}; known: {ALLOCATORS}")
        if not 0.0 <= self.target < 1.0:
            raise ValidationError(f"target must lie in [0, 1), got {self.target}")
        if not 0.0 <= self.probe_ratio <= 1.0:
            raise ValidationError(f"probe ratio must lie in [0, 1], got {self.probe_ratio}")
        if self.calib_n < 1:
            raise ValidationError("calib_n must be >= 1")
        Granularity.parse(self.granularity)
        self.outlier()
        if self.allocator == "mrp":
            self.mrp()
        if self.allocator == "owl" and not 0 <= self.owl_lambda <= min(self.target, 1 - self.target):
            raise ValidationError(f"owl_lambda must lie in [0, min(target, 1 - target)]")
        if self.model is None:
            self.outlier_spec()
        return self

    def outlier(self):
        return OutlierConfig(self.outlier_multiplier)

    def mrp(self):
        kw = dict(target_ratio=self.target, outlier=self.outlier(), max_ratio_cap=self.max_ratio_cap,
                  refresh_activations=self.refresh_activations)
        if self.preset:
            return MrpConfig.preset(self.preset, **kw)
        return MrpConfig(self.initial_ratio, initial_step=self.initial_step, min_step=self.min_step,
                         decay=self.decay, **kw)

    def outlier_spec(self):
        fr, sc = list(self.outlier_fractions), list(self.outlier_scales)
        if len(fr) == 1:
            fr = fr * self.blocks
        if len(sc) == 1:
            sc = sc * self.blocks
        if len(fr) != self.blocks or len(sc) != self.blocks:
            raise ValidationError(f"outlier fractions/scales need {self.blocks} entries")
        return OutlierSpec(tuple(fr), tuple(sc))

    def to_dict(self):
        return dataclasses.asdict(self)


def _floats(text):
    try:
        return [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _bool(text):
    t = str(text).lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


# (flag, RunConfig field, type, help)
_RUN_FLAGS = [
    ("--model", "model", str, "safetensors model (block.{i}.{layer}.weight)"),
    ("--remap", "remap", str, "JSON mapping source tensor names to canonical names"),
    ("--calib", "calib", str, "safetensors calibration batch (tensor 'calibration')"),
    ("--activations", "activations", str, "precomputed block inputs (static-activation mode)"),
    ("--seed", "seed", int, "seed for synthetic model and calibration"),
    ("--blocks", "blocks", int, "synthetic block count"),
    ("--dim", "dim", int, "synthetic model width"),
    ("--hidden", "hidden", int, "synthetic hidden width (default: dim)"),
    ("--outlier-fractions", "outlier_fractions", _floats, "per-block outlier fractions"),
    ("--outlier-scales", "outlier_scales", _floats, "per-block outlier scales"),
    ("--calib-n", "calib_n", int, "synthetic calibration rows"),
    ("--skew-spread", "skew_spread", float, "log-uniform column skew range of synthetic calibration"),
    ("--metric", "metric", str, "pruning metric"),
    ("--allocator", "allocator", str, "one of " + ", ".join(ALLOCATORS)),
    ("--target", "target", float, "target global sparsity"),
    ("--initial-ratio", "initial_ratio", float, "MRP uniform pre-pruning ratio"),
    ("--initial-step", "initial_step", float, "MRP initial step"),
    ("--min-step", "min_step", float, "MRP minimum step"),
    ("--decay", "decay", float, "MRP step decay"),
    ("--max-ratio-cap", "max_ratio_cap", float, "per-block sparsity cap for MRP"),
    ("--refresh-activations", "refresh_activations", _bool, "re-run calibration every MRP iteration"),
    ("--preset", "preset", str, "MRP hyperparameter preset, e.g. llama2-7b"),
    ("--owl-lambda", "owl_lambda", float, "OWL band half-width"),
    ("--outlier-multiplier", "outlier_multiplier", float, "M in the outlier test"),
    ("--granularity", "granularity", str, "unstructured, structured, or n:m"),
    ("--probe-ratio", "probe_ratio", float, "sparsity used for LPS probes"),
    ("--evaluator", "evaluator", str, "external evaluator command ({model}, {calib} placeholders)"),
    ("--out", "out", str, "output directory"),
]


def _add_run_flags(p):
    p.add_argument("--config", help="JSON run configuration; flags override it")
    for flag, dest, typ, help_ in _RUN_FLAGS:
        p.add_argument(flag, dest=dest, type=typ, default=None, help=help_)


def build_config(args) -> RunConfig:
    data = {}
    if getattr(args, "config", None):
        data = mio.read_json(args.config)
        unknown = set(data) - {f.name for f in dataclasses.fields(RunConfig)}
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    for _, dest, _, _ in _RUN_FLAGS:
        v = getattr(args, dest, None)
        if v is not None:
            data[dest] = v
    try:
        cfg = RunConfig(**data)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc
    return cfg.validate()


class Run:
    """Lazily materialised model, calibration and activations for one config."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self._acts = None
        if cfg.model:
            self.model = mio.import_model(cfg.model, cfg.remap)
        else:
            self.model = gen_model(cfg.seed, cfg.blocks, cfg.dim, cfg.outlier_spec(), cfg.hidden)
        self.static = None
        if cfg.activations:
            self.static = expand_block_inputs(self.model, mio.import_activations(cfg.activations, len(self.model)))
        if cfg.calib:
            self.calib = mio.import_calibration(cfg.calib)
        elif self.static is None:
            skew = log_uniform_skew(cfg.seed + 2, self.model.d, cfg.skew_spread) if cfg.skew_spread > 1 else None
            self.calib = gen_calibration(cfg.seed + 1, cfg.calib_n, self.model.d, skew)
        else:
            self.calib = None

    @property
    def acts(self):
        if self._acts is None:
            self._acts = self.static if self.static is not None else forward_collect(self.model, self.calib)
        return self._acts

    def require_calib(self, what):
        if self.calib is None:
            raise ConfigurationError(f"{what} needs a calibration batch (--calib or synthetic)")

    def evaluator(self):
        if self.cfg.evaluator:
            return CommandEvaluator(self.cfg.evaluator)
        return OutputDistance(self.model)

    def allocate(self):
        """Returns (plan, trace or None, pruned model)."""
        cfg, m = self.cfg, self.model
        if cfg.allocator == "mrp":
            res = run_mrp(m, None if self.static is not None else self.calib, cfg.metric, cfg.mrp(),
                          activations=self.static)
            return res.plan, res.trace, res.model
        if cfg.allocator == "uniform":
            plan = allocate_uniform(len(m), cfg.target)
        elif cfg.allocator == "er":
            plan = allocate_er([[l.shape for l in b.layers] for b in m.blocks], cfg.target)
        elif cfg.allocator == "owl":
            dense_lrl = model_lrl(m, self.acts, cfg.metric, cfg.outlier())
            plan = allocate_owl(dense_lrl, cfg.target, cfg.owl_lambda, m.block_sizes)
        else:
            plan = allocate_global(m, self.acts, cfg.metric, cfg.target)
        plan = dataclasses.replace(plan, metric_tag=cfg.metric, granularity=cfg.granularity)
        pruned = apply_plan(m, plan, cfg.metric, self.acts, cfg.granularity)
        return plan, None, pruned

    def lrl_of(self, model):
        acts = self.static if self.static is not None else forward_collect(model, self.calib)
        return model_lrl(model, acts, self.cfg.metric, self.cfg.outlier())


def _emit(obj):
    sys.stdout.write(mio.dumps_json(obj))


def cmd_synth(args):
    cfg = build_config(args)
    out = args.model_out or os.path.join(cfg.out, "model.safetensors")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    model = gen_model(cfg.seed, cfg.blocks, cfg.dim, cfg.outlier_spec(), cfg.hidden)
    mio.export_model(model, out)
    written = [out]
    calib_out = args.calib_out
    if calib_out:
        skew = log_uniform_skew(cfg.seed + 2, cfg.dim, cfg.skew_spread) if cfg.skew_spread > 1 else None
        mio.export_calibration(gen_calibration(cfg.seed + 1, cfg.calib_n, cfg.dim, skew), calib_out)
        written.append(calib_out)
    _emit({"written": written, "blocks": len(model), "params": model.total_size})
    return 0


def cmd_allocate(args):
    run = Run(build_config(args))
    plan, trace, pruned = run.allocate()
    files = mio.export_report(run.cfg.out, plan=plan, trace=trace, lrl=run.lrl_of(pruned))
    _emit({"plan": [float(r) for r in plan.ratios], "global_sparsity": measure_global_sparsity(pruned),
           "written": files})
    return 0


def cmd_prune(args):
    cfg = build_config(args)
    run = Run(cfg)
    if args.plan:
        plan = SparsityPlan.from_dict(mio.read_json(args.plan))
    else:
        plan, _, _ = run.allocate()
    pruned = apply_plan(run.model, plan, cfg.metric, run.acts, cfg.granularity)
    eff = effective_ratios(plan, cfg.granularity)
    plan = dataclasses.replace(plan, granularity=Granularity.parse(cfg.granularity).tag)
    os.makedirs(cfg.out, exist_ok=True)
    mio.export_masks(pruned, os.path.join(cfg.out, "masks.bin"), os.path.join(cfg.out, "masks.json"),
                     plan, plan.granularity, extra={"effective_ratios": [float(r) for r in eff]})
    files = ["masks.bin", "masks.json"]
    if args.zeroed_out:
        mio.export_model(pruned, args.zeroed_out, apply_masks=True)
        files.append(args.zeroed_out)
    _emit({"global_sparsity": measure_global_sparsity(pruned), "written": files})
    return 0


def cmd_lrl(args):
    cfg = build_config(args)
    run = Run(cfg)
    model = run.model
    if args.masks:
        bin_path = os.path.splitext(args.masks)[0] + ".bin"
        model = mio.apply_mask_file(model, mio.import_masks(bin_path, args.masks))
    lrl = run.lrl_of(model)
    os.makedirs(cfg.out, exist_ok=True)
    mio.export_report(cfg.out, lrl=lrl)
    mio.write_json(os.path.join(cfg.out, "lrl.json"), lrl.to_dict())
    _emit({"lrl": lrl.to_dict(), "max_min": max_min_gap(lrl)})
    return 0


def cmd_lps(args):
    cfg = build_config(args)
    run = Run(cfg)
    run.require_calib("lps")
    prof = profile_lps(run.model, run.calib, cfg.metric, cfg.probe_ratio, run.evaluator(), cfg.granularity)
    os.makedirs(cfg.out, exist_ok=True)
    mio.export_report(cfg.out, lps=prof)
    _emit({"lps": [float(v) for v in prof.values], "metric": cfg.metric, "probe_ratio": cfg.probe_ratio})
    return 0


def cmd_reversal(args):
    a, b = mio.read_profile_csv(args.a), mio.read_profile_csv(args.b)
    _emit({"reversal_rate": reversal_rate(a, b, adjacent=args.adjacent), "blocks": int(a.size),
           "pairs": "adjacent" if args.adjacent else "all"})
    return 0


def cmd_shift(args):
    cfg = build_config(args)
    run = Run(cfg)
    run.require_calib("shift")
    if args.prefix_plan.endswith(".json"):
        ratios = SparsityPlan.from_dict(mio.read_json(args.prefix_plan)).ratios
    else:
        ratios = np.array(_floats(args.prefix_plan))
    deltas = outlier_shift(run.model, run.calib, cfg.metric, ratios, cfg.outlier(), args.prefix_len)
    os.makedirs(cfg.out, exist_ok=True)
    mio.write_csv(os.path.join(cfg.out, "shift.csv"), ["block", "outlier_ratio_delta"],
                  [(i, float(v)) for i, v in enumerate(deltas)])
    _emit({"deltas": [float(v) for v in deltas]})
    return 0


def cmd_report(args):
    """Full run: allocation, baselines, LPS, masks, CSV/JSON and figures."""
    from . import plotting

    cfg = build_config(args)
    run = Run(cfg)
    plan, trace, pruned = run.allocate()
    final_lrl = run.lrl_of(pruned)
    lps = None
    if run.calib is not None:
        lps = profile_lps(run.model, run.calib, cfg.metric, cfg.probe_ratio, run.evaluator(), cfg.granularity)
    files = mio.export_report(cfg.out, plan=plan, trace=trace, lrl=final_lrl, lps=lps, model=pruned,
                              granularity=cfg.granularity)

    achieved = measure_global_sparsity(pruned)
    comparison = {cfg.allocator: {"max_min": max_min_gap(final_lrl), "global_sparsity": achieved}}
    plans = {cfg.allocator: plan}
    lrls = {cfg.allocator: final_lrl}
    if cfg.allocator != "uniform":
        uni = allocate_uniform(len(run.model), achieved)
        up = apply_plan(run.model, uni, cfg.metric, run.acts, cfg.granularity)
        ul = run.lrl_of(up)
        plans["uniform"], lrls["uniform"] = uni, ul
        comparison["uniform"] = {"max_min": max_min_gap(ul), "global_sparsity": measure_global_sparsity(up)}
    mio.write_json(os.path.join(cfg.out, "comparison.json"), comparison)
    mio.write_json(os.path.join(cfg.out, "config.json"), cfg.to_dict())
    files += ["comparison.json", "config.json"]

    figs = [plotting.plot_plans(plans, os.path.join(cfg.out, "plan.png")),
            plotting.plot_lrl(lrls, os.path.join(cfg.out, "lrl.png"))]
    if lps is not None:
        figs.append(plotting.plot_lps({cfg.metric: lps}, os.path.join(cfg.out, "lps.png")))
    if trace is not None:
        figs.append(plotting.plot_trace(trace, os.path.join(cfg.out, "trace.png")))
    files += [os.path.basename(f) for f in figs]
    _emit({"comparison": comparison, "written": files})
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="mrpalloc", description=__doc__.split("\n")[0] or None,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic model (and calibration batch)")
    _add_run_flags(p)
    p.add_argument("--model-out", help="model path (default: OUT/model.safetensors)")
    p.add_argument("--calib-out", help="also write a calibration batch here")
    p.set_defaults(func=cmd_synth)

    for name, func, help_ in [("allocate", cmd_allocate, "compute a sparsity plan"),
                              ("lps", cmd_lps, "layerwise pruning sensitivity profile"),
                              ("report", cmd_report, "allocation + baselines + figures")]:
        p = sub.add_parser(name, help=help_)
        _add_run_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("prune", help="apply a plan and export masks")
    _add_run_flags(p)
    p.add_argument("--plan", help="plan.json to apply (default: allocate first)")
    p.add_argument("--zeroed-out", help="also write zero-applied weights here")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("lrl", help="layerwise redundancy levels")
    _add_run_flags(p)
    p.add_argument("--masks", help="masks.json (with masks.bin next to it) to apply first")
    p.set_defaults(func=cmd_lrl)

    p = sub.add_parser("reversal", help="sensitivity reversal rate between two LPS CSVs")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--adjacent", action="store_true", help="only compare neighbouring blocks")
    p.set_defaults(func=cmd_reversal)

    p = sub.add_parser("shift", help="outlier-ratio shift after pruning a block prefix")
    _add_run_flags(p)
    p.add_argument("--prefix-plan", required=True, help="comma-separated ratios or a plan.json")
    p.add_argument("--prefix-len", type=int, help="number of leading blocks allowed to be pruned")
    p.set_defaults(func=cmd_shift)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MrpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
