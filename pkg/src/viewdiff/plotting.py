"""Report figures written next to the CSV/JSON outputs."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

PNG_META = {"Software": None}


def _save(fig, path: Union[str, Path]) -> None:
    fig.savefig(path, dpi=100, metadata=PNG_META)
    plt.close(fig)


def plot_loss(rows: Sequence[tuple[int, float, float]], path: Union[str, Path]) -> None:
    steps = [r[0] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, [r[1] for r in rows], lw=0.6, alpha=0.4, label="loss")
    ax.plot(steps, [r[2] for r in rows], lw=1.5, label="EMA")
    ax.set_xlabel("step")
    ax.set_ylabel("noise MSE")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)


def plot_sweep_grid(
    images: dict, steps: Sequence[int], scales: Sequence[float], path: Union[str, Path],
    condition=None, target=None,
) -> None:
    """Grid of samples, rows = DDIM steps, columns = guidance scale.

    ``images`` maps ``(steps, scale)`` to a ``[3, H, W]`` array or ``None`` for
    a failed cell. Condition and target views, when given, fill an extra column.
    """
    extra = condition is not None or target is not None
    ncol = len(scales) + int(extra)
    fig, axes = plt.subplots(len(steps), ncol, figsize=(1.3 * ncol, 1.3 * len(steps)), squeeze=False)
    for i, s in enumerate(steps):
        for j, g in enumerate(scales):
            ax = axes[i][j]
            img = images.get((s, g))
            if img is None:
                ax.text(0.5, 0.5, "failed", ha="center", va="center")
            else:
                ax.imshow(np.transpose(img, (1, 2, 0)), interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title(f"scale {g:g}", fontsize=8)
            if j == 0:
                ax.set_ylabel(f"{s} steps", fontsize=8)
        if extra:
            ax = axes[i][-1]
            ref = {0: condition, 1: target}.get(i)
            if ref is not None:
                ax.imshow(np.transpose(ref, (1, 2, 0)), interpolation="nearest")
                ax.set_title("condition" if i == 0 else "target", fontsize=8)
            ax.axis("off")
    fig.tight_layout()
    _save(fig, path)


def plot_eval(summary: Sequence[dict], path: Union[str, Path]) -> None:
    """Bar chart of mean PSNR / perceptual distance / embedding similarity per method."""
    names = [row["mode"] for row in summary]
    keys = [("mean_psnr", "PSNR (dB)"), ("mean_perceptual", "perceptual"), ("mean_embed_sim", "embed sim")]
    fig, axes = plt.subplots(1, 3, figsize=(9, 3))
    for ax, (key, label) in zip(axes, keys):
        vals = [row.get(key) if row.get(key) is not None else np.nan for row in summary]
        ax.bar(names, vals, color="tab:blue")
        ax.set_title(label, fontsize=9)
        ax.tick_params(labelsize=8)
    fig.tight_layout()
    _save(fig, path)
