"""Report figures rendered to files alongside the delimited output."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def save_fid_curve(rows, path, title="Generation quality during training"):
    """Line plot of FID versus training iteration.

    ``rows`` are dicts with 'iteration' and 'fid' keys; rows without a fid
    value are ignored.
    """
    pts = [(r["iteration"], r["fid"]) for r in rows if r.get("fid") not in (None, "")]
    fig, ax = plt.subplots(figsize=(6, 4))
    if pts:
        xs, ys = zip(*sorted(pts))
        ax.plot(xs, ys, marker="o", lw=1.5)
    else:
        ax.text(0.5, 0.5, "no fid rows", ha="center", va="center",
                transform=ax.transAxes, color="gray")
    ax.set_xlabel("training iteration")
    ax.set_ylabel("FID (frozen desk-scale extractor)")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_accuracy_chart(groups, path, title="Distilled-set test accuracy"):
    """Bar chart of mean accuracy with std error bars.

    ``groups`` is a list of dicts with 'label', 'mean', 'std'.
    """
    fig, ax = plt.subplots(figsize=(6, 4))
    if groups:
        xs = range(len(groups))
        ax.bar(xs, [g["mean"] for g in groups],
               yerr=[g["std"] for g in groups], capsize=4, color="#4878cf")
        ax.set_xticks(list(xs))
        ax.set_xticklabels([g["label"] for g in groups], rotation=20, ha="right")
        ax.set_ylim(0, 1)
    else:
        ax.text(0.5, 0.5, "no accuracy rows", ha="center", va="center",
                transform=ax.transAxes, color="gray")
    ax.set_ylabel("top-1 accuracy")
    ax.set_title(title)
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
