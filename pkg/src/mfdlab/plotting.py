"""PNG figures for run artifacts (headless Agg backend)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_regional(results, path, title: str = "") -> Path:
    """Regional accumulations of several runs on one axis per region."""
    results = list(results)
    L = results[0].regional.shape[1]
    fig, axes = plt.subplots(L, 1, figsize=(7, 2.2 * L), sharex=True)
    axes = np.atleast_1d(axes)
    for res in results:
        t_min = res.times / 60.0
        step = max(1, len(t_min) // 2000)
        for i, ax in enumerate(axes):
            ax.plot(t_min[::step], res.regional[::step, i], lw=1.2, label=res.controller)
    cfg = results[0].config
    for i, ax in enumerate(axes):
        if cfg.objective == "setpoint":
            nb = cfg.n_bar[i]
            ax.axhline(nb, color="k", lw=0.6, ls="--")
            ax.axhspan(0.98 * nb, 1.02 * nb, color="0.85", zorder=0)
        ax.set_ylabel(f"n{i + 1} [veh]")
        ax.grid(alpha=0.3)
    axes[0].legend(loc="best", fontsize=8)
    axes[-1].set_xlabel("time [min]")
    if title:
        axes[0].set_title(title)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_controls(results, path, title: str = "") -> Path:
    results = list(results)
    cols = [c for c in results[0].columns if c.startswith("u_")]
    fig, axes = plt.subplots(len(cols), 1, figsize=(7, 1.8 * len(cols)), sharex=True)
    axes = np.atleast_1d(axes)
    for res in results:
        t_min = res.column("t_s") / 60.0
        for ax, c in zip(axes, cols):
            ax.step(t_min, res.column(c), where="post", lw=1.0, label=res.controller)
    for ax, c in zip(axes, cols):
        ax.set_ylabel(c)
        ax.grid(alpha=0.3)
    axes[0].legend(loc="best", fontsize=8)
    axes[-1].set_xlabel("time [min]")
    if title:
        axes[0].set_title(title)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_sweep(values, settling, path, label: str = "dt_reinforce [s]") -> Path:
    """Worst-region settling time against the swept parameter."""
    fig, ax = plt.subplots(figsize=(5, 3))
    y = [np.nan if s is None else s / 60.0 for s in settling]
    ax.plot(values, y, "o-")
    ax.set_xlabel(label)
    ax.set_ylabel("settling time [min]")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
