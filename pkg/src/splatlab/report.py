"""Matplotlib figures rendered next to the CSV outputs of each command."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def save_training_curves(metrics_rows, out_path, stage1_iters=None):
    """Two-panel loss / holdout-PSNR curves from the metrics log rows."""
    if not metrics_rows:
        return
    iters = [int(r["iter"]) for r in metrics_rows]
    losses = [float(r["loss"]) for r in metrics_rows]
    psnrs = [float(r["psnr_holdout"]) for r in metrics_rows]

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax1.plot(iters, losses, lw=1.2)
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("loss")
    ax1.set_yscale("log")
    ax2.plot(iters, psnrs, lw=1.2, color="tab:green")
    ax2.set_xlabel("iteration")
    ax2.set_ylabel("holdout PSNR (dB)")
    if stage1_iters is not None and iters and stage1_iters < max(iters):
        for ax in (ax1, ax2):
            ax.axvline(stage1_iters, color="gray", ls="--", lw=0.8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def save_eval_plot(rows, out_path):
    """Per-frame PSNR/SSIM against time."""
    if not rows:
        return
    ts = [r["t"] for r in rows]
    fig, ax1 = plt.subplots(figsize=(5.5, 3.2))
    ax1.plot(ts, [r["psnr"] for r in rows], "o-", ms=3, label="PSNR")
    ax1.set_xlabel("t")
    ax1.set_ylabel("PSNR (dB)")
    ax2 = ax1.twinx()
    ax2.plot(ts, [r["ssim"] for r in rows], "s--", ms=3, color="tab:orange",
             label="SSIM")
    ax2.set_ylabel("SSIM")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def save_ablation_plot(rows, out_path):
    """Bar chart of final holdout PSNR per ablation cell."""
    if not rows:
        return
    labels = [str(r["label"]) for r in rows]
    psnrs = [float(r["psnr"]) for r in rows]
    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(rows)), 3.2))
    ax.bar(range(len(rows)), psnrs, color="tab:blue")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("holdout PSNR (dB)")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
