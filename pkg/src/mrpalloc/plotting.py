"""Report figures. Everything renders off-screen to files."""

import logging
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

logger = logging.getLogger(__name__)

BLUE = "#1f77b4"
ORANGE = "#ff7f0e"
GREEN = "#2ca02c"
RED = "#d62728"
GRAY = "#7f7f7f"

GRID_KWARGS = dict(linestyle="-", color="black", linewidth=0.25, alpha=0.4)


def _finish(fig, ax, path, xlabel, ylabel, legend=True):
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(True, **GRID_KWARGS)
    if legend and ax.get_legend_handles_labels()[0]:
        ax.legend(frameon=False)
    fig.tight_layout()
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    logger.debug("wrote %s", path)
    return path


def _grouped_bars(series, path, ylabel, ylim=None):
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    n = len(series)
    width = 0.8 / max(n, 1)
    for k, (label, values) in enumerate(series.items()):
        values = np.asarray(values, dtype=float)
        x = np.arange(values.size) + (k - (n - 1) / 2) * width
        ax.bar(x, values, width=width, label=label)
    if ylim is not None:
        ax.set_ylim(*ylim)
    return _finish(fig, ax, path, "block", ylabel)


def plot_plans(plans, path):
    """Bar chart of per-block sparsity for each named plan."""
    return _grouped_bars({k: getattr(v, "ratios", v) for k, v in plans.items()}, path,
                         "sparsity ratio", (0, 1))


def plot_lrl(profiles, path):
    """Per-block non-outlier ratio, one bar group per named profile."""
    series = {k: getattr(v, "values", v) for k, v in profiles.items()}
    lo = min(float(np.min(v)) for v in series.values())
    return _grouped_bars(series, path, "non-outlier ratio", (max(0.0, lo - 0.05), 1.0))


def plot_lps(profiles, path):
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    for label, p in profiles.items():
        values = np.asarray(getattr(p, "values", p), dtype=float)
        ax.plot(np.arange(values.size), values, marker="o", label=label)
    return _finish(fig, ax, path, "block", "sensitivity")


def plot_trace(trace, path):
    """Global sparsity and Max-Min gap of the redundancy vector across MRP iterations."""
    steps = trace.steps
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    if not steps:
        ax.text(0.5, 0.5, "no iterations", ha="center", va="center", transform=ax.transAxes)
        return _finish(fig, ax, path, "iteration", "global sparsity", legend=False)
    it = np.array([s.iteration for s in steps])
    ax.plot(it, [s.global_sparsity for s in steps], color=BLUE, label="global sparsity")
    ax2 = ax.twinx()
    ax2.plot(it, [max(s.lrl) - min(s.lrl) for s in steps], color=ORANGE, label="Max-Min")
    ax2.set_ylabel("Max-Min")
    return _finish(fig, ax, path, "iteration", "global sparsity")
