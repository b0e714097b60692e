"""Figures written next to the JSON/CSV outputs of ``train`` and ``eval``."""

from __future__ import annotations

import os
from typing import Mapping, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_trace(trace: Sequence, path: str) -> str:
    """Loss and token accuracy against step, from ``TraceRow``-like objects."""
    steps = [r.step for r in trace]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, [r.loss for r in trace], color="tab:blue", label="loss")
    ax.set_xlabel("step")
    ax.set_ylabel("loss per document")
    ax.set_yscale("log")
    ax2 = ax.twinx()
    ax2.plot(steps, [r.token_accuracy for r in trace], color="tab:orange", label="token accuracy")
    ax2.set_ylabel("token accuracy")
    ax2.set_ylim(0, 1)
    fig.legend(loc="upper center", ncol=2, frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_metrics(aggregate: Mapping[str, float], path: str, title: str = "") -> str:
    """Bar chart of aggregate scores in [0, 1]."""
    names = list(aggregate)
    fig, ax = plt.subplots(figsize=(max(3, 0.8 * len(names) + 1), 3.2))
    bars = ax.bar(names, [aggregate[n] for n in names], color="tab:green")
    for b, n in zip(bars, names):
        ax.annotate(f"{aggregate[n]:.3f}", (b.get_x() + b.get_width() / 2, b.get_height()),
                    ha="center", va="bottom", fontsize=8)
    ax.set_ylim(0, 1.08)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_histogram(values: Sequence[float], path: str, xlabel: str) -> str:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.hist(values, bins=20, range=(0, 1), color="tab:purple")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("documents")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def eval_figures(report: dict, out_dir: str, stem: str = "eval") -> list[str]:
    """Aggregate bar chart plus a histogram of the task's headline per-document score."""
    os.makedirs(out_dir, exist_ok=True)
    agg = {k: v for k, v in report["aggregate"].items() if isinstance(v, (int, float))}
    paths = [plot_metrics(agg, os.path.join(out_dir, f"{stem}_aggregate.png"), report.get("task", ""))]
    key: Optional[str] = report.get("headline")
    if key:
        vals = [d[key] for d in report["documents"] if isinstance(d.get(key), (int, float))]
        if vals:
            paths.append(plot_histogram(vals, os.path.join(out_dir, f"{stem}_{key}_hist.png"), key))
    return paths
