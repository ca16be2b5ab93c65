"""Figure rendering for run reports: loss/accuracy curves, 2-D feature
projections, the scaling fit, and ablation bars. Each function reads the
delimited output its CSV sibling carries and writes a PNG next to it."""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def plot_metrics(metrics_csv, out_png) -> None:
    with open(metrics_csv) as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return
    epochs = [int(r["epoch"]) for r in rows]

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    for key, label in [("l_so", "source CE"), ("l_ta", "target CE"),
                       ("l_ge", "reconstruction"), ("l_inv", "invariance"),
                       ("total", "total")]:
        ax1.plot(epochs, [float(r[key]) for r in rows], label=label)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend(fontsize=8)
    ax1.set_title("losses")

    ax2.plot(epochs, [float(r["source_acc"]) for r in rows], label="source acc")
    tgt = [float(r["target_acc"]) for r in rows]
    if not any(np.isnan(tgt)):
        ax2.plot(epochs, tgt, label="target acc")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("accuracy")
    ax2.set_ylim(0, 1)
    ax2.legend(fontsize=8)
    ax2.set_title("accuracy")

    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def _pca_2d(x: np.ndarray) -> np.ndarray:
    centered = x - x.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    return centered @ vt[:2].T


def plot_features(features_csv, out_png) -> None:
    """Four panels: causal and spurious coordinates (2-D PCA), colored by
    domain and by label."""
    with open(features_csv) as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    zc_cols = [i for i, h in enumerate(header) if h.startswith("zc")]
    zs_cols = [i for i, h in enumerate(header) if h.startswith("zs")]
    domains = np.array([r[1] for r in rows])
    labels = np.array([int(r[2]) for r in rows])
    data = np.array([[float(v) for v in r[3:]] for r in rows])
    zc = _pca_2d(data[:, [c - 3 for c in zc_cols]])
    zs = _pca_2d(data[:, [c - 3 for c in zs_cols]])

    fig, axes = plt.subplots(2, 2, figsize=(9, 8))
    panels = [
        (axes[0, 0], zc, domains == "source", "causal by domain", ("source", "target")),
        (axes[0, 1], zs, domains == "source", "spurious by domain", ("source", "target")),
        (axes[1, 0], zc, labels == 0, "causal by label", ("class 0", "class 1")),
        (axes[1, 1], zs, labels == 0, "spurious by label", ("class 0", "class 1")),
    ]
    for ax, pts, mask, title, names in panels:
        ax.scatter(pts[mask, 0], pts[mask, 1], s=6, alpha=0.6, label=names[0])
        ax.scatter(pts[~mask, 0], pts[~mask, 1], s=6, alpha=0.6, label=names[1])
        ax.set_title(title, fontsize=9)
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def plot_scaling(bench: dict, out_png) -> None:
    xs = np.array([r[0] for r in bench["rows"]], dtype=float)
    ys = np.array([r[1] for r in bench["rows"]], dtype=float)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(xs, ys, "o", label="median time")
    grid = np.linspace(0, xs.max() * 1.05, 50)
    ax.plot(grid, bench["slope"] * grid + bench["intercept"], "--",
            label=f"linear fit (R$^2$={bench['r_squared']:.4f})")
    ax.set_xlabel("nodes")
    ax.set_ylabel("forward+backward time (s)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def plot_ablation(mean_table: dict, out_png) -> None:
    names = list(mean_table)
    values = [mean_table[n] for n in names]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.bar(names, values)
    ax.set_ylabel("mean target accuracy")
    ax.set_ylim(0, 1)
    for i, v in enumerate(values):
        ax.text(i, v + 0.01, f"{v:.3f}", ha="center", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
