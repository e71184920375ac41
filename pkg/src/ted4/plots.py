"""PNG figures written next to the CSV/JSON reports."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def rd_curve(rows, path, extra=None, title="rate-distortion"):
    """``rows`` are RD points (bytes, psnr); ``extra`` maps a label to more rows."""
    fig, ax = plt.subplots(figsize=(4.5, 3.2), dpi=120)
    curves = {"model": rows}
    curves.update(extra or {})
    for label, pts in curves.items():
        pts = sorted(pts, key=lambda r: r.bytes)
        ax.plot([r.bytes / 1024 for r in pts], [r.psnr for r in pts], "o-", label=label)
    ax.set_xlabel("container size (KiB)")
    ax.set_ylabel("PSNR (dB)")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    if len(curves) > 1:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def duration_bars(hist, path, title="temporal duration"):
    fig, ax = plt.subplots(figsize=(4.0, 3.0), dpi=120)
    labels = ["<= 0.2", "0.2 - 0.8", ">= 0.8"]
    counts = [hist.short, hist.medium, hist.long]
    ax.bar(labels, counts, color=["#c44e52", "#dd8452", "#4c72b0"])
    ax.set_xlabel("window length")
    ax.set_ylabel("anchors")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def section_bars(sections, path, title="bits per section"):
    fig, ax = plt.subplots(figsize=(4.5, 3.0), dpi=120)
    names = list(sections)
    ax.bar(names, [8 * sections[n]["bytes"] for n in names])
    ax.set_yscale("log")
    ax.set_ylabel("bits")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
