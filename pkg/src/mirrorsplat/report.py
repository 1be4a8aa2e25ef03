"""Figure rendering for training logs and evaluation results."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .images import save_png


def read_training_log(path) -> dict:
    """Columns of the training CSV as float arrays keyed by header name."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"empty training log: {path}")
    return {key: np.array([float(r[key]) for r in rows])
            for key in rows[0].keys()}


def plot_training_curves(log_path, out_png) -> None:
    cols = read_training_log(log_path)
    it = cols["iteration"]
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(10, 4))
    for key in ("l_rgb", "l_m", "l_sym", "total"):
        ax0.plot(it, cols[key], label=key, linewidth=1.0)
    ax0.set_xlabel("iteration")
    ax0.set_ylabel("loss")
    ax0.set_yscale("log")
    ax0.legend(fontsize=8)
    ax0.set_title("training losses")
    ax1.plot(it, cols["gaussian_count"], color="tab:gray", linewidth=1.0)
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("gaussians")
    ax1.set_title("model size")
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)


def plot_metric_bars(named_summaries, out_png) -> None:
    """Grouped PSNR/SSIM bars per run, full and detail scope."""
    names = [n for n, _ in named_summaries]
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for ax, metric in zip(axes, ("psnr", "ssim")):
        width = 0.35
        xs = np.arange(len(names))
        for off, scope, color in ((-width / 2, "full", "tab:blue"),
                                  (width / 2, "detail", "tab:orange")):
            vals = [s.get(scope, {}).get(metric, np.nan)
                    for _, s in named_summaries]
            ax.bar(xs + off, vals, width, label=scope, color=color)
        ax.set_xticks(xs)
        ax.set_xticklabels(names, rotation=20, ha="right", fontsize=8)
        ax.set_title(metric)
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)


def save_strip(gt: np.ndarray, render: np.ndarray, out_png,
               diff_gain: float = 4.0) -> None:
    """Side-by-side GT | render | amplified absolute difference."""
    if gt.shape != render.shape:
        raise ValueError(f"shape mismatch: {gt.shape} vs {render.shape}")
    diff = np.clip(np.abs(gt - render) * diff_gain, 0.0, 1.0)
    pad = np.ones((gt.shape[0], 2, 3))
    save_png(out_png, np.concatenate([gt, pad, render, pad, diff], axis=1))


def render_report(run_dir, log_path=None, named_summaries=None) -> list:
    """Render whatever figures the run directory has inputs for."""
    run_dir = Path(run_dir)
    written = []
    if log_path is not None and Path(log_path).exists():
        out = run_dir / "training_curves.png"
        plot_training_curves(log_path, out)
        written.append(out)
    if named_summaries:
        out = run_dir / "metric_bars.png"
        plot_metric_bars(named_summaries, out)
        written.append(out)
    return written
