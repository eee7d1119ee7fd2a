"""Figure rendering for benchmark and training reports.

All figures are written straight to files (Agg backend, no display), so
report commands can run headless and drop PNGs next to their delimited
outputs.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def save_benchmark_bars(rows: list[dict], path) -> Path:
    """Grouped bar chart of the benchmark table, one group per strategy."""
    path = Path(path)
    strategies = [row["strategy"] for row in rows]
    metrics = ("accuracy", "macro_precision", "macro_recall")
    x = range(len(strategies))
    width = 0.27

    fig, ax = plt.subplots(figsize=(1.6 * max(len(strategies), 4), 4.0))
    for i, metric in enumerate(metrics):
        offsets = [xi + (i - 1) * width for xi in x]
        ax.bar(offsets, [float(row[metric]) for row in rows], width,
               label=metric.replace("_", " "))
    ax.set_xticks(list(x))
    ax.set_xticklabels(strategies, rotation=20, ha="right")
    ax.set_ylim(0.0, 1.0)
    ax.set_ylabel("score")
    ax.set_title("fusion strategy comparison")
    ax.legend(loc="lower right", fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_training_curves(history: list[dict], path, title: str = "training") -> Path:
    """Loss and accuracy per epoch on twin axes."""
    path = Path(path)
    epochs = [h["epoch"] for h in history]
    fig, ax_loss = plt.subplots(figsize=(6.0, 4.0))
    ax_loss.plot(epochs, [h["loss"] for h in history], color="tab:red",
                 label="loss")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss", color="tab:red")
    ax_loss.tick_params(axis="y", labelcolor="tab:red")

    ax_acc = ax_loss.twinx()
    ax_acc.plot(epochs, [h["accuracy"] for h in history], color="tab:blue",
                label="accuracy")
    ax_acc.set_ylabel("accuracy", color="tab:blue")
    ax_acc.set_ylim(0.0, 1.05)
    ax_acc.tick_params(axis="y", labelcolor="tab:blue")

    ax_loss.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_attention_heatmap(records, path, max_bags: int = 24) -> Path:
    """Instance-weight rows for a sample of bags, padded to equal length.

    Cells beyond a bag's size are masked out; the colormap runs 0..1 so
    weight mass is comparable across rows.
    """
    path = Path(path)
    records = list(records)[:max_bags]
    if not records:
        raise ValueError("no attention records to plot")
    width = max(len(rec.weights) for rec in records)
    grid = [list(rec.weights) + [float("nan")] * (width - len(rec.weights))
            for rec in records]

    fig, ax = plt.subplots(
        figsize=(max(4.0, 0.45 * width), max(2.5, 0.3 * len(records))))
    im = ax.imshow(grid, aspect="auto", cmap="viridis", vmin=0.0, vmax=1.0)
    ax.set_xlabel("instance index")
    ax.set_yticks(range(len(records)))
    ax.set_yticklabels([rec.bag_id for rec in records], fontsize=7)
    ax.set_title("per-instance attention weights")
    fig.colorbar(im, ax=ax, label="weight")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
