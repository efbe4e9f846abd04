"""Figures written next to the delimited outputs of each command."""
from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .seqio import AMINO_ACIDS  # noqa: E402


def _save(fig, path) -> None:
    fig.tight_layout()
    # fixed metadata keeps repeated renders byte-stable
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def plot_loss_curve(records: Sequence[dict], path) -> None:
    steps = [r["step"] for r in records]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for key in ("total", "mlm", "concept", "orth"):
        ys = [r[key] for r in records]
        if any(ys):
            ax.plot(steps, ys, label=key, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    _save(fig, path)


def plot_weight_rows(M: np.ndarray, concepts: Sequence[str], tokens: Sequence[str], path) -> None:
    """One bar chart per concept over the 20 amino-acid columns."""
    cols = [list(tokens).index(a) for a in AMINO_ACIDS]
    k = len(concepts)
    ncol = 2
    nrow = (k + ncol - 1) // ncol
    fig, axes = plt.subplots(nrow, ncol, figsize=(10, 1.6 * nrow), sharex=True, squeeze=False)
    for i, ax in enumerate(axes.flat):
        if i >= k:
            ax.axis("off")
            continue
        row = M[i, cols]
        ax.bar(range(len(cols)), row, color=np.where(row >= 0, "tab:blue", "tab:red"))
        ax.axhline(0, color="k", lw=0.5)
        ax.set_title(concepts[i], fontsize=8)
        ax.tick_params(labelsize=6)
    for ax in axes[-1]:
        ax.set_xticks(range(len(cols)))
        ax.set_xticklabels(AMINO_ACIDS, fontsize=6)
    _save(fig, path)


def plot_matrix(mat: np.ndarray, names: Sequence[str], path, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(6.5, 5.5))
    im = ax.imshow(mat, cmap="RdBu_r", vmin=-1, vmax=1)
    ax.set_xticks(range(len(names)))
    ax.set_yticks(range(len(names)))
    ax.set_xticklabels(names, rotation=90, fontsize=6)
    ax.set_yticklabels(names, fontsize=6)
    ax.set_title(title, fontsize=9)
    fig.colorbar(im, ax=ax, shrink=0.8)
    _save(fig, path)


def plot_attribution(residues: str, scores: Sequence[float], path, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(max(4, 0.18 * len(residues)), 2.5))
    ax.bar(range(len(residues)), scores, color="tab:purple")
    ax.axhline(0, color="k", lw=0.5)
    ax.set_xticks(range(len(residues)))
    ax.set_xticklabels(list(residues), fontsize=6)
    ax.set_title(title, fontsize=9)
    _save(fig, path)


def plot_shift_histogram(deltas: Sequence[float], path, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.hist(deltas, bins=20, color="tab:green")
    ax.axvline(0, color="k", lw=0.5)
    ax.set_xlabel("concept change (normalized)")
    ax.set_title(title, fontsize=9)
    _save(fig, path)


def plot_concept_distributions(raw: np.ndarray, names: Sequence[str], path) -> None:
    k = len(names)
    ncol = 4
    nrow = (k + ncol - 1) // ncol
    fig, axes = plt.subplots(nrow, ncol, figsize=(10, 1.8 * nrow), squeeze=False)
    for i, ax in enumerate(axes.flat):
        if i >= k:
            ax.axis("off")
            continue
        ax.hist(raw[:, i], bins=30, color="tab:gray")
        ax.set_title(names[i], fontsize=8)
        ax.tick_params(labelsize=6)
    _save(fig, path)
