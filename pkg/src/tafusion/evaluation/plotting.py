"""PNG figures for reports.  Rendering is off-screen and byte-stable for equal inputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def plot_curves(curves: dict[str, tuple[np.ndarray, np.ndarray]], path, kind: str = "roc"):
    """``curves`` maps a label to (x, y): (FPR, TPR) for ROC or (recall, precision) for PR."""
    fig, ax = plt.subplots(figsize=(5, 4.5))
    for label, (x, y) in curves.items():
        if kind == "roc":
            ax.plot(x, y, label=label, lw=1.2)
        else:
            ax.step(x, y, where="post", label=label, lw=1.2)
    if kind == "roc":
        ax.plot([0, 1], [0, 1], color="0.7", lw=0.8, ls="--")
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
    else:
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=7, loc="lower right" if kind == "roc" else "upper right")
    return _save(fig, path)


def plot_loss_curves(curves: dict[str, tuple[list[float], list[float]]], path):
    fig, ax = plt.subplots(figsize=(6, 4))
    for i, (label, (train, val)) in enumerate(curves.items()):
        c = f"C{i % 10}"
        ep = np.arange(1, len(train) + 1)
        ax.plot(ep, train, color=c, lw=1, label=f"{label} train")
        ax.plot(ep, val, color=c, lw=1, ls="--", label=f"{label} val")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=6, ncol=2)
    return _save(fig, path)


def plot_metric_bars(means: dict[str, float], path, metric: str = "auroc",
                     errors: dict[str, float] | None = None):
    names = list(means)
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(names) + 2), 4))
    err = [errors.get(n, 0.0) for n in names] if errors else None
    ax.bar(range(len(names)), [means[n] for n in names], yerr=err, color="C0", capsize=3)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=40, ha="right", fontsize=8)
    ax.set_ylabel(metric)
    lo = min(means.values())
    ax.set_ylim(max(0.0, lo - 0.1), min(1.0, max(means.values()) + 0.05) if metric.startswith("au") else None)
    return _save(fig, path)


def plot_missingness(items, edges, ratio, path):
    fig, ax = plt.subplots(figsize=(7, max(3, 0.18 * len(items) + 1)))
    im = ax.imshow(ratio, aspect="auto", cmap="viridis", vmin=0, vmax=1)
    ax.set_yticks(range(len(items)))
    ax.set_yticklabels(items, fontsize=6)
    ax.set_xticks(range(len(edges) - 1))
    ax.set_xticklabels([f"{edges[k]:.0f}-{edges[k + 1]:.0f}" for k in range(len(edges) - 1)],
                       rotation=45, ha="right", fontsize=6)
    ax.set_xlabel("minutes from anchor")
    fig.colorbar(im, ax=ax, label="missing ratio")
    return _save(fig, path)
