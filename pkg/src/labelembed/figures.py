"""Matplotlib rendering of fit reports to image files.

Used by the CLI report path to drop PNG figures next to the delimited
output.  Rendering is deterministic (fixed draw subsets, no timestamps), so
figure files participate in the output manifest like any other artifact.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from matplotlib.patches import Ellipse

from .analysis import EllipseSpec, PcaResult

_DPI = 150
_MAX_PROFILE_LINES = 60


def _save(fig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def save_moment_surface(table: np.ndarray, path) -> None:
    """Heatmaps of the Beta mean and log-variance over the embedding grid."""
    z1 = np.unique(table[:, 0])
    z2 = np.unique(table[:, 1])
    mean = table[:, 2].reshape(z1.size, z2.size)
    logvar = table[:, 3].reshape(z1.size, z2.size)
    fig, axes = plt.subplots(1, 2, figsize=(10, 4.2), constrained_layout=True)
    for ax, grid, title, cmap in (
        (axes[0], mean, "mean", "viridis"),
        (axes[1], logvar, "log variance", "magma"),
    ):
        im = ax.pcolormesh(z2, z1, grid, cmap=cmap, shading="nearest")
        ax.set_xlabel("z2")
        ax.set_ylabel("z1")
        ax.set_title(title)
        fig.colorbar(im, ax=ax)
    _save(fig, path)


def save_correlation_heatmap(
    matrix: np.ndarray, class_names: Sequence[str], path, title: str
) -> None:
    K = len(class_names)
    fig, ax = plt.subplots(figsize=(max(4.5, 0.55 * K + 2),) * 2)
    vmax = max(1.0, float(np.abs(matrix).max()))
    im = ax.imshow(matrix, cmap="RdBu_r", vmin=-vmax, vmax=vmax)
    ax.set_xticks(range(K), class_names, rotation=90)
    ax.set_yticks(range(K), class_names)
    ax.set_title(title)
    if K <= 12:
        for i in range(K):
            for j in range(K):
                ax.text(
                    j, i, f"{matrix[i, j]:.2f}", ha="center", va="center", fontsize=7
                )
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    _save(fig, path)


def save_biplot(
    pca: PcaResult,
    class_names: Sequence[str],
    path,
    groups: Optional[Sequence[str]] = None,
    ellipses: Sequence[EllipseSpec] = (),
    title: str = "embedding biplot",
) -> None:
    """Scatter of PC scores colored by group with loading arrows overlaid."""
    fig, ax = plt.subplots(figsize=(7, 6))
    scores = pca.scores
    if groups is None:
        ax.scatter(scores[:, 0], scores[:, 1], s=12, alpha=0.6, color="tab:gray")
    else:
        groups = list(groups)
        for g in sorted(set(groups)):
            mask = np.array([x == g for x in groups])
            ax.scatter(scores[mask, 0], scores[mask, 1], s=12, alpha=0.6, label=str(g))
        ax.legend(fontsize=8, title="group")
    arrow_scale = 0.9 * np.abs(scores).max() / max(np.abs(pca.loadings).max(), 1e-12)
    for k, name in enumerate(class_names):
        dx, dy = pca.loadings[k] * arrow_scale
        ax.annotate(
            "",
            xy=(dx, dy),
            xytext=(0, 0),
            arrowprops=dict(arrowstyle="->", color="tab:red", lw=1.2),
        )
        ax.text(dx * 1.06, dy * 1.06, name, color="tab:red", fontsize=9)
    for spec in ellipses:
        ax.add_patch(
            Ellipse(
                spec.center,
                width=2 * spec.axes[0],
                height=2 * spec.axes[1],
                angle=np.degrees(spec.angle),
                fill=False,
                lw=1.2,
                color="black",
                alpha=0.7,
            )
        )
    evr = pca.explained_variance_ratio
    ax.set_xlabel(f"PC1 ({evr[0]:.1%})" if evr.size else "PC1")
    ax.set_ylabel(f"PC2 ({evr[1]:.1%})" if evr.size > 1 else "PC2")
    ax.set_title(title)
    ax.axhline(0, color="gray", lw=0.5)
    ax.axvline(0, color="gray", lw=0.5)
    fig.tight_layout()
    _save(fig, path)


def save_instance_profile(
    draws: np.ndarray,
    zhat: np.ndarray,
    counts: np.ndarray,
    class_names: Sequence[str],
    path,
    title: str = "",
) -> None:
    """Per-instance view: vote bars, sampled embeddings, posterior mean."""
    K = len(class_names)
    x = np.arange(K)
    fig, ax = plt.subplots(figsize=(max(5.0, 0.6 * K + 2), 4))
    bar_ax = ax.twinx()
    bar_ax.bar(x, counts, color="0.8", width=0.6, zorder=0)
    bar_ax.set_ylabel("votes", color="0.5")
    bar_ax.tick_params(axis="y", colors="0.5")
    stride = max(1, draws.shape[0] // _MAX_PROFILE_LINES)
    for row in draws[::stride]:
        ax.plot(x, row, color="tab:green", alpha=0.12, lw=0.8, zorder=1)
    ax.plot(x, zhat, color="tab:orange", lw=2.2, marker="o", zorder=2)
    ax.set_xticks(x, class_names, rotation=45 if K > 6 else 0)
    ax.set_ylabel("embedding value")
    ax.set_zorder(bar_ax.get_zorder() + 1)
    ax.patch.set_visible(False)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)
