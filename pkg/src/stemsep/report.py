"""Report artifacts: delimited tables plus rendered matplotlib figures.

Every report function writes plain CSV first (the scriptable interface) and
a PNG figure alongside it. Figures use the Agg backend so rendering works
headless.
"""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

VARIANT_ORDER = ["C1", "C2", "C3", "C4", "C5", "C6", "C7", "P"]


def write_results_csv(path, results: dict):
    """results: (variant, source, metric) -> median-of-tracks value."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "source", "metric", "value"])
        for (variant, source, metric), value in _ordered(results):
            writer.writerow([variant, source, metric, repr(value)])


def quartile_rows(track_values: dict) -> list:
    """track_values: (variant, source, metric) -> list of per-track medians.

    Returns box-plot rows (variant, source, metric, min, q1, median, q3, max).
    """
    rows = []
    for (variant, source, metric), values in _ordered(track_values):
        arr = np.asarray(values, dtype=np.float64)
        q1, med, q3 = (float(np.percentile(arr, p)) for p in (25, 50, 75))
        rows.append((variant, source, metric, float(arr.min()), q1, med, q3, float(arr.max())))
    return rows


def write_quartiles_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "source", "metric", "min", "q1", "median", "q3", "max"])
        for variant, source, metric, lo, q1, med, q3, hi in rows:
            writer.writerow([variant, source, metric, repr(lo), repr(q1), repr(med), repr(q3), repr(hi)])


def _ordered(mapping):
    def key(item):
        (variant, source, metric) = item[0]
        vi = VARIANT_ORDER.index(variant) if variant in VARIANT_ORDER else len(VARIANT_ORDER)
        return (vi, variant, source, metric)

    return sorted(mapping.items(), key=key)


def render_metric_boxplot(path, metric: str, track_values: dict):
    """Grouped per-source box plot of per-track medians, one box per variant."""
    variants = sorted(
        {v for (v, _, m) in track_values if m == metric},
        key=lambda v: (VARIANT_ORDER.index(v) if v in VARIANT_ORDER else 99, v))
    sources = sorted({s for (_, s, m) in track_values if m == metric})
    if not variants or not sources:
        raise ValueError(f"no data for metric {metric}")
    fig, ax = plt.subplots(figsize=(1.8 + 1.6 * len(sources), 4.0))
    width = 0.8 / len(variants)
    cmap = plt.get_cmap("tab10")
    for vi, variant in enumerate(variants):
        positions = [si + (vi - (len(variants) - 1) / 2) * width for si in range(len(sources))]
        values = [track_values[(variant, s, metric)] for s in sources]
        box = ax.boxplot(values, positions=positions, widths=width * 0.9,
                         patch_artist=True, manage_ticks=False)
        for patch in box["boxes"]:
            patch.set_facecolor(cmap(vi % 10))
            patch.set_alpha(0.7)
        for med in box["medians"]:
            med.set_color("black")
        ax.plot([], [], color=cmap(vi % 10), label=variant)
    ax.set_xticks(range(len(sources)))
    ax.set_xticklabels(sources)
    ax.set_ylabel(f"{metric} (dB)")
    ax.set_title(f"{metric} per source (median over frames, box over tracks)")
    ax.legend(loc="best", fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_history(path, history):
    """Loss curves and the learning-rate staircase for one training run."""
    epochs = np.arange(len(history.train_loss))
    fig, ax1 = plt.subplots(figsize=(7, 4))
    ax1.plot(epochs, history.train_loss, label="train loss", color="tab:blue")
    ax1.plot(epochs, history.valid_loss, label="valid loss", color="tab:orange")
    if 0 <= history.best_epoch < len(epochs):
        ax1.axvline(history.best_epoch, color="tab:green", ls="--", lw=1,
                    label=f"best epoch {history.best_epoch}")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.grid(alpha=0.3)
    ax2 = ax1.twinx()
    ax2.plot(epochs, history.lr, label="lr", color="tab:gray", ls=":")
    ax2.set_ylabel("learning rate")
    ax2.set_yscale("log")
    lines1, labels1 = ax1.get_legend_handles_labels()
    lines2, labels2 = ax2.get_legend_handles_labels()
    ax1.legend(lines1 + lines2, labels1 + labels2, loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
