"""Report figures written next to the CSV/JSON outputs."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_psnr_curves(report, path, title: str | None = None) -> None:
    """Per-frame PSNR of the enhanced and compressed clips."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.0))
        frames = np.arange(1, len(report.per_frame_psnr) + 1)
        ax.plot(frames, report.per_frame_psnr, "o-", ms=3, label="enhanced")
        if report.compressed_psnr:
            ax.plot(frames, report.compressed_psnr, "s--", ms=3, label="compressed")
        ax.set_xlabel("frame")
        ax.set_ylabel("PSNR (dB)")
        ax.set_title(title or f"dPSNR {report.delta_psnr:+.3f} dB, SD {report.sd:.3f} dB")
        ax.legend(frameon=False)
        _save(fig, path)


def plot_loss_curve(losses, path, log_rows=None) -> None:
    """Training loss per iteration, with validation dPSNR on a twin axis if logged."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.0))
        ax.semilogy(np.arange(len(losses)), losses, lw=0.8, color="C0")
        ax.set_xlabel("iteration")
        ax.set_ylabel("Charbonnier loss")
        rows = [r for r in (log_rows or []) if r.get("dpsnr_val") is not None]
        if rows:
            ax2 = ax.twinx()
            ax2.plot([r["iter"] for r in rows], [r["dpsnr_val"] for r in rows], "o-", ms=3, color="C1")
            ax2.set_ylabel("val dPSNR (dB)")
        _save(fig, path)


def plot_attention(masks, path) -> None:
    """Side-by-side spatial attention masks of one frame."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(masks), figsize=(2.2 * len(masks), 2.4), squeeze=False)
        for i, (ax, m) in enumerate(zip(axes[0], masks)):
            ax.imshow(np.asarray(m).reshape(np.asarray(m).shape[-2:]), cmap="viridis", vmin=0, vmax=1)
            ax.set_title(f"block {i + 1}")
            ax.axis("off")
        _save(fig, path)
