"""Delimited reports and the figures rendered alongside them.

Every report path writes a tab-separated text record and, next to it,
a matplotlib figure of the same data. Figures use the Agg backend and
never open a window.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def write_metric_report(path, records: Sequence[Mapping]) -> None:
    """Line-delimited metric records: dataset, metric, value, std."""
    lines = ["dataset\tmetric\tvalue\tstd"]
    for r in records:
        std = r.get("std")
        std_s = "" if std is None else f"{std:.17g}"
        lines.append(f"{r['dataset']}\t{r['metric']}\t{r['value']:.17g}\t{std_s}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def render_uncertainty_histogram(scores, kept_ids, sample_ids, path) -> None:
    """Histogram of image scores with the drop threshold marked."""
    scores = np.asarray(scores, dtype=np.float64)
    kept = np.asarray([sid in set(kept_ids) for sid in sample_ids])
    fig, ax = plt.subplots(figsize=(7, 4))
    bins = min(50, max(10, scores.size // 20))
    ax.hist(scores[kept], bins=bins, alpha=0.75, label="kept")
    if (~kept).any():
        ax.hist(scores[~kept], bins=bins, alpha=0.75, label="dropped")
        ax.axvline(scores[~kept].min(), color="k", linestyle="--", linewidth=1)
    ax.set_xlabel("image uncertainty (nats)")
    ax.set_ylabel("images")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_loss_curves(loss_curves, path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    for i, curve in enumerate(loss_curves):
        ax.plot(curve, linewidth=0.8, label=f"member {i}" if len(loss_curves) <= 10 else None)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    if len(loss_curves) <= 10:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_iou_bars(per_label: Mapping[str, float], path) -> None:
    names = list(per_label)
    values = [per_label[n] for n in names]
    fig, ax = plt.subplots(figsize=(max(5, 0.7 * len(names) + 2), 4))
    ax.bar(range(len(names)), values)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("IoU")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_pck_curve(pck_values: Mapping[float, float], path) -> None:
    ths = sorted(pck_values)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(ths, [pck_values[t] for t in ths], marker="o")
    ax.set_xlabel("threshold (% of longer side)")
    ax.set_ylabel("PCK (%)")
    ax.set_ylim(0, 105)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_trend(xs, ys, xlabel, ylabel, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(xs, ys, marker="o")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
