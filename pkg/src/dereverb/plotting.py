"""Figure rendering for the report paths (loss curves, attention bins).

Uses the Agg backend so figures render headlessly; each function writes a
PNG next to the corresponding CSV.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .analysis import T60BinSummary
from .training import EpochRecord

__all__ = ["save_loss_curve_figure", "save_attention_figure"]


def save_loss_curve_figure(history: list[EpochRecord], path) -> None:
    epochs = [r.epoch for r in history]
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    ax.plot(epochs, [r.train_loss_db for r in history], label="train")
    ax.plot(epochs, [r.val_loss_db for r in history], label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("negative SISDR loss (dB)")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_attention_figure(bins: list[T60BinSummary], path) -> None:
    centers = [0.5 * (b.bin_lo + b.bin_hi) for b in bins]
    width = min(b.bin_hi - b.bin_lo for b in bins) * 0.4
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    ax.bar(
        [c - width / 2 for c in centers],
        [float(b.mean_a[0]) for b in bins],
        width=width,
        label=r"$\bar{a}_1$ (exponential dilation)",
    )
    ax.bar(
        [c + width / 2 for c in centers],
        [float(b.mean_a[1]) for b in bins],
        width=width,
        label=r"$\bar{a}_2$ (dilation 1)",
    )
    ax.set_xlabel("T60 bin centre (s)")
    ax.set_ylabel("mean attention weight")
    ax.set_ylim(0.0, 1.0)
    ax.legend()
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
