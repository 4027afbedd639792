"""Figures for the ``report`` command. Rendered off-screen straight to files."""

from __future__ import annotations

from pathlib import Path

from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure


def loss_curve(history: list[dict], path: str | Path, title: str = "") -> Path:
    """Training/validation loss on the left, R@1 and mIoU on the right."""
    if not history:
        raise ValueError("empty training history")
    fig = Figure(figsize=(9, 3.4))
    FigureCanvasAgg(fig)
    ax_loss, ax_met = fig.subplots(1, 2)

    epochs = [h["epoch"] for h in history]
    ax_loss.plot(epochs, [h["loss"] for h in history], label="train", lw=1.5)
    evald = [h for h in history if "val_loss" in h]
    if evald:
        ax_loss.plot([h["epoch"] for h in evald], [h["val_loss"] for h in evald],
                     "o-", ms=3, label="eval", lw=1.2)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.legend(frameon=False)

    if evald:
        ev = [h["epoch"] for h in evald]
        for key, label in (("r1_03", "R@1 IoU>0.3"), ("r1_05", "R@1 IoU>0.5"),
                           ("r1_07", "R@1 IoU>0.7"), ("miou", "mIoU")):
            ax_met.plot(ev, [h[key] for h in evald], marker=".", label=label)
        ax_met.set_ylim(0, 1)
        ax_met.legend(frameon=False, fontsize=8)
    else:
        ax_met.text(0.5, 0.5, "no evaluation records", ha="center", va="center",
                    transform=ax_met.transAxes)
    ax_met.set_xlabel("epoch")

    for ax in (ax_loss, ax_met):
        ax.spines[["top", "right"]].set_visible(False)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    return path
