"""Figure rendering for run reports. Everything draws straight to PNG
files through the Agg backend; no display is ever needed."""
from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def training_curve(aggregate: np.ndarray, path, label: str = "score") -> Path:
    """Mean score per iteration with a one-std band."""
    it, mean, std = aggregate[:, 0], aggregate[:, 1], aggregate[:, 2]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(it, mean, lw=1.8, label=label)
    ax.fill_between(it, mean - std, mean + std, alpha=0.25, lw=0)
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean episode score")
    ax.legend(loc="best")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def comparison_curve(agg_a: np.ndarray, agg_b: np.ndarray, label_a: str,
                     label_b: str, path) -> Path:
    """Both runs' score curves and bands on one axis."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for agg, label in ((agg_a, label_a), (agg_b, label_b)):
        it, mean, std = agg[:, 0], agg[:, 1], agg[:, 2]
        line, = ax.plot(it, mean, lw=1.8, label=label)
        ax.fill_between(it, mean - std, mean + std, alpha=0.2, lw=0,
                        color=line.get_color())
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean episode score")
    ax.legend(loc="best")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def convergence_curve(iterations, loss_norms, envelope, path) -> Path:
    """Exact-tier sup-norm loss against its multiplicative-decay envelope,
    on a log scale."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.semilogy(iterations, np.maximum(loss_norms, 1e-300), lw=1.8,
                label="loss sup-norm")
    ax.semilogy(iterations, np.maximum(envelope, 1e-300), lw=1.4, ls="--",
                label="decay envelope")
    ax.set_xlabel("iteration")
    ax.set_ylabel("sup-norm")
    ax.legend(loc="best")
    ax.grid(alpha=0.3, which="both")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
