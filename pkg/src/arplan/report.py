"""Figure rendering for training, evaluation, and benchmark reports.

All figures are written to files next to the delimited output; nothing is
shown interactively.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def render_training_curves(records, path) -> None:
    """Loss and validation-error curves over epochs."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    epochs = [r.epoch for r in records]
    ax1.plot(epochs, [r.train_loss for r in records], marker="o",
             label="train loss")
    for r in records:
        if r.stage == 1:
            ax1.axvspan(r.epoch - 0.5, r.epoch + 0.5, color="0.9", zorder=0)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.set_title("training loss (shaded: perception stage)")
    ax1.legend()
    stage2 = [r for r in records if r.stage == 2]
    if stage2:
        ax2.plot([r.epoch for r in stage2], [r.train_l1 for r in stage2],
                 marker="o", label="train L1")
        ax2.plot([r.epoch for r in stage2], [r.val_l1 for r in stage2],
                 marker="s", label="val L1")
        ax2.set_xlabel("epoch")
        ax2.set_ylabel("mean waypoint L1")
        ax2.set_title("trajectory error")
        ax2.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_score_bars(summary: dict, baseline: dict, path) -> None:
    """Model vs constant-velocity-baseline sub-score bars."""
    keys = ["nc", "dac", "ep", "ttc", "c", "pdms"]
    x = range(len(keys))
    width = 0.38
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar([i - width / 2 for i in x], [summary[k] for k in keys], width,
           label="model")
    ax.bar([i + width / 2 for i in x], [baseline[k] for k in keys], width,
           label="constant velocity")
    ax.set_xticks(list(x))
    ax.set_xticklabels([k.upper() for k in keys])
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("score")
    ax.set_title("driving quality sub-scores")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_bench(rows, path) -> None:
    """Grouped vs naive dispatch throughput per batch size."""
    sizes = sorted({r["batch_size"] for r in rows})
    by = {(r["batch_size"], r["mode"]): r for r in rows}
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    for mode, marker in (("grouped", "o"), ("naive", "s")):
        ax1.plot(sizes, [by[(s, mode)]["samples_per_sec"] for s in sizes],
                 marker=marker, label=mode)
    ax1.set_xlabel("batch size")
    ax1.set_ylabel("samples / s")
    ax1.set_title("dispatch throughput")
    ax1.set_xscale("log", base=2)
    ax1.legend()
    ax2.bar([str(s) for s in sizes],
            [by[(s, "grouped")]["speedup"] for s in sizes])
    ax2.axhline(1.0, color="k", linewidth=0.8)
    ax2.set_xlabel("batch size")
    ax2.set_ylabel("grouped / naive speedup")
    ax2.set_title("batch-reallocation speedup")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
