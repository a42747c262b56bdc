"""Run directory outputs: CSV/JSON metrics and static SVG plots."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from ..weighting import LOSS_NAMES

METRIC_COLUMNS = (
    ["stage", "epoch", "lr", "val_acc", "pool_size", "active"]
    + [f"loss_{n}" for n in LOSS_NAMES]
    + [f"s_{n}" for n in LOSS_NAMES]
    + [f"w_{n}" for n in LOSS_NAMES]
)


def write_json(path, data):
    path = Path(path)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path


def read_json(path):
    return json.loads(Path(path).read_text())


def write_metrics_csv(path, history):
    """One row per (stage, epoch); absent terms are left empty."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for record in history:
            writer.writerow({k: ("" if record.get(k) is None else record[k]) for k in METRIC_COLUMNS})
    return Path(path)


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "promptdil"
    plt.rcParams["svg.fonttype"] = "none"
    return plt


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})


def plot_usage_heatmaps(usage, out_dir):
    """``usage[k][l]``: mean routing weight per prompt on test set ``k`` at layer ``l``."""
    plt = _pyplot()
    paths = []
    if not usage:
        return paths
    for layer in range(len(usage[0])):
        grid = np.array([stage[layer] for stage in usage])
        fig, ax = plt.subplots(figsize=(8, 1 + 0.5 * len(grid)))
        im = ax.imshow(grid, aspect="auto", cmap="viridis", interpolation="nearest")
        ax.set_xlabel("prompt index")
        ax.set_ylabel("test set (stage)")
        ax.set_yticks(range(len(grid)), [str(k + 1) for k in range(len(grid))])
        ax.set_title(f"prompt selection, layer {layer}")
        fig.colorbar(im, ax=ax)
        path = Path(out_dir) / f"selection_layer{layer}.svg"
        _save(fig, path)
        plt.close(fig)
        paths.append(path)
    return paths


def plot_usage_histograms(usage, out_dir, tau_s=0.01):
    plt = _pyplot()
    paths = []
    for k, stage in enumerate(usage):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for layer, w in enumerate(stage):
            ax.hist(np.asarray(w), bins=30, histtype="step", label=f"layer {layer}")
        ax.axvline(tau_s, color="k", linestyle=":", linewidth=1)
        ax.set_xlabel("mean routing weight")
        ax.set_ylabel("prompts")
        ax.set_title(f"usage histogram, test set {k + 1}")
        ax.legend(fontsize=7)
        path = Path(out_dir) / f"usage_hist_stage{k + 1}.svg"
        _save(fig, path)
        plt.close(fig)
        paths.append(path)
    return paths


def plot_uw_curves(history, out_dir):
    plt = _pyplot()
    rows = [r for r in history if r.get("s_ce") not in (None, "")]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name in LOSS_NAMES:
        ys = [float(r[f"w_{name}"]) for r in rows]
        if ys:
            ax.plot(range(1, len(ys) + 1), ys, marker=".", label=name)
    ax.set_yscale("log")
    ax.set_xlabel("epoch (stages >= 2, concatenated)")
    ax.set_ylabel("exp(-s)")
    ax.set_title("uncertainty weights")
    if rows:
        ax.legend(fontsize=7)
    path = Path(out_dir) / "uw_weights.svg"
    _save(fig, path)
    plt.close(fig)
    return [path]


def write_plots(out_dir, history, usage, tau_s=0.01):
    plot_dir = Path(out_dir) / "plots"
    plot_dir.mkdir(parents=True, exist_ok=True)
    return (plot_usage_heatmaps(usage, plot_dir) + plot_usage_histograms(usage, plot_dir, tau_s)
            + plot_uw_curves(history, plot_dir))


def write_run(result, out_dir, checkpoint=True, plots=True):
    """Write every run artifact of an :class:`ExperimentResult` to ``out_dir``."""
    from .checkpoint import save_checkpoint

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    est = result.estimator
    write_json(out / "config.json", result.config.to_dict())
    write_metrics_csv(out / "metrics.csv", est.history_)
    write_json(out / "summary.json", result.summary())
    write_json(out / "rmatrix.json", {"R": result.rmatrix.to_list(), "avg_acc": result.avg_acc,
                                      "avg_f": result.avg_f})
    if result.xcomp is not None:
        write_json(out / "xcomp.json", result.xcomp.to_dict())
    write_json(out / "trace.json", {
        "usage": result.usage,
        "drift": {str(k): v.to_dict() for k, v in est.drift_reports_.items()},
        "events": [list(e) for e in est.events_],
    })
    if checkpoint:
        save_checkpoint(est, out / "checkpoint.json", result.config.hash())
    if plots:
        write_plots(out, est.history_, result.usage, result.config.tau_s)
    return out
