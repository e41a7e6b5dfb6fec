"""PNG figures for reports. Rendering is headless and byte-stable for fixed inputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no timestamps or software tags in the PNG so reruns produce identical bytes
_META = {"Software": None}

plt.rcParams.update({
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "figure.dpi": 100,
    "savefig.dpi": 100,
    "axes.spines.top": False,
    "axes.spines.right": False,
})


def _save(fig, path):
    fig.savefig(path, format="png", metadata=_META)
    plt.close(fig)
    return path


def plot_samples(path, cells, labels, world=None, title=""):
    """Scatter of generated points, one colour per cell; component means as crosses."""
    fig, ax = plt.subplots(figsize=(4.5, 4.0))
    for x, lab in zip(cells, labels):
        ax.scatter(x[:, 0], x[:, 1], s=3, alpha=0.6, label=lab)
    if world is not None:
        ax.scatter(world.means[:, 0], world.means[:, 1], marker="x", c="k", s=20, linewidths=0.8)
    ax.set_xlabel("x0")
    ax.set_ylabel("x1")
    ax.set_title(title)
    if len(cells) <= 10:
        ax.legend(markerscale=3, frameon=False)
    return _save(fig, path)


def plot_loss(path, curve, title="loss", smooth=50):
    curve = np.asarray(curve, dtype=float)
    fig, ax = plt.subplots(figsize=(4.5, 3.0))
    ax.plot(curve, lw=0.5, alpha=0.4, color="C0")
    if curve.size >= smooth:
        kernel = np.ones(smooth) / smooth
        ax.plot(np.arange(smooth - 1, curve.size), np.convolve(curve, kernel, mode="valid"), color="C0")
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_title(title)
    return _save(fig, path)


def plot_breakdown(path, steps, curves):
    """UA / IRA / CRA / drift against step, one line per method."""
    metrics = ("ua", "ira", "cra", "drift")
    fig, axes = plt.subplots(1, 4, figsize=(11, 2.8))
    for ax, m in zip(axes, metrics):
        for method, c in curves.items():
            ax.plot(steps, c[m], marker="o", ms=3, label=method)
        ax.set_title(m.upper() if m != "drift" else "unconditional drift")
        ax.set_xlabel("step")
    axes[0].legend(frameon=False)
    fig.tight_layout()
    return _save(fig, path)


def plot_sequential(path, ua, targets):
    """Heat map of UA[request][after request]; empty cells are requests not yet made."""
    k = len(targets)
    grid = np.full((k, k), np.nan)
    for i in range(k):
        for j in range(k):
            if ua[i][j] is not None:
                grid[i, j] = ua[i][j]
    fig, ax = plt.subplots(figsize=(3.2 + 0.4 * k, 2.6 + 0.3 * k))
    im = ax.imshow(grid, vmin=0, vmax=1, cmap="viridis")
    for i in range(k):
        for j in range(k):
            if not np.isnan(grid[i, j]):
                ax.text(j, i, f"{grid[i, j]:.2f}", ha="center", va="center", color="w", fontsize=8)
    ax.set_xticks(range(k), [f"after {j + 1}" for j in range(k)])
    ax.set_yticks(range(k), [f"T{i + 1} (a={t})" for i, t in enumerate(targets)])
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    return _save(fig, path)


def plot_relearn(path, epochs, series):
    """UA per fine-tuning epoch for each method."""
    fig, ax = plt.subplots(figsize=(4.5, 3.0))
    for method, ua in series.items():
        ax.plot(epochs, ua, marker="o", ms=3, label=method)
    ax.set_xlabel("fine-tune epoch")
    ax.set_ylabel("UA")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_mi_nodes(path, nodes, contributions, labels):
    """Per-node contribution of each MI estimate across log-SNR."""
    fig, ax = plt.subplots(figsize=(4.5, 3.0))
    for c, lab in zip(contributions, labels):
        ax.plot(nodes, c, label=lab)
    ax.set_xlabel("log-SNR")
    ax.set_ylabel("weighted integrand")
    ax.legend(frameon=False)
    return _save(fig, path)
