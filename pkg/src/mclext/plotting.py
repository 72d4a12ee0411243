"""Report figures, rendered off-screen to image files."""
from __future__ import annotations

import os
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .objectives import UtteranceMetrics  # noqa: E402


def _save(fig, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp.png")
    fig.savefig(tmp, dpi=120, bbox_inches="tight")
    plt.close(fig)
    os.replace(tmp, path)


def plot_eval(records: Sequence[UtteranceMetrics], path) -> None:
    """SI-SDRi histogram for positive pairs next to ESR for negative pairs."""
    pos = [r.si_sdri for r in records if r.si_sdri is not None]
    neg = [r.esr for r in records if r.polarity == "negative"]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    for ax, vals, label, color in (
        (axes[0], pos, "SI-SDRi (dB), positive pairs", "tab:blue"),
        (axes[1], neg, "ESR (dB), negative pairs", "tab:red"),
    ):
        if vals:
            ax.hist(vals, bins=min(20, max(5, len(vals) // 2)), color=color, alpha=0.8)
            ax.axvline(sum(vals) / len(vals), color="k", lw=1, ls="--")
        else:
            ax.text(0.5, 0.5, "no records", ha="center", va="center", transform=ax.transAxes)
        ax.set_xlabel(label)
        ax.set_ylabel("count")
        ax.spines["right"].set_visible(False)
        ax.spines["top"].set_visible(False)
    _save(fig, path)


def plot_flops(rows: Sequence[dict], path) -> None:
    """GMAC per second of mixture against the number of enrollment-processing blocks."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for g in sorted({r["G"] for r in rows}):
        sel = sorted((r for r in rows if r["G"] == g), key=lambda r: r["enroll_blocks"])
        ax.plot([r["enroll_blocks"] for r in sel], [r["gmac_per_s"] for r in sel], marker="o", label=f"G={g}")
    ax.set_xlabel("enrollment blocks")
    ax.set_ylabel("GMAC/s")
    ax.legend(frameon=False)
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    _save(fig, path)


def plot_training(history: Sequence[dict], path) -> None:
    steps = [r["step"] for r in history if r["loss"] is not None]
    losses = [r["loss"] for r in history if r["loss"] is not None]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(steps, losses, lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss (dB)")
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    _save(fig, path)
