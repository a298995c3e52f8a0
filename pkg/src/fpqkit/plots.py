"""Figure rendering for the CLI report paths.

Each function takes already-computed rows or stats and writes one PNG next
to the delimited output.  Rendering is pinned to the Agg backend with fixed
dpi and stripped metadata so the same inputs always produce the same bytes.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_SAVE = dict(dpi=110, metadata={"Software": None})


def _finish(fig, path) -> None:
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def plot_grid(rows, path) -> None:
    """One strip of representable values per format, densest at the top."""
    fmts = []
    for r in rows:
        if r[0] not in fmts:
            fmts.append(r[0])
    fig, ax = plt.subplots(figsize=(7, 0.6 + 0.5 * max(len(fmts), 1)))
    for i, name in enumerate(fmts):
        vals = [r[3] for r in rows if r[0] == name and r[1] == "value"]
        ax.plot(vals, np.full(len(vals), i), "|", markersize=14, label=name)
    ax.set_yticks(range(len(fmts)), fmts)
    ax.set_xlabel("representable value")
    ax.set_ylim(-0.7, max(len(fmts) - 0.3, 0.3))
    fig.tight_layout()
    _finish(fig, path)


def plot_stats(stats: dict, path, sites=None) -> None:
    """Per-timestep token-absmax boxes for a few sites."""
    sites = sites or sorted(stats)[:4]
    fig, axes = plt.subplots(len(sites), 1, figsize=(7, 2.2 * len(sites)),
                             squeeze=False)
    for ax, site in zip(axes[:, 0], sites):
        s = stats[site]
        ax.boxplot([row for row in s.absmax], positions=range(len(s.timesteps)),
                   whis=1.5, showfliers=False, widths=0.6)
        ax.set_xticks(range(len(s.timesteps)),
                      [f"{t:.2f}" for t in s.timesteps])
        ax.set_ylabel("token absmax")
        ax.set_title(site, fontsize=9)
    axes[-1, 0].set_xlabel("t")
    fig.tight_layout()
    _finish(fig, path)


def plot_sweep(rows, path) -> None:
    """Final loss against calibration budget, one line per variant."""
    variants = []
    for r in rows:
        if r[0] not in variants:
            variants.append(r[0])
    fig, ax = plt.subplots(figsize=(6, 4))
    for v in variants:
        pts = [(r[1], r[2]) for r in rows if r[0] == v]
        ax.plot([p[0] for p in pts], [p[1] for p in pts], "o-", label=v)
    ax.set_xscale("log")
    ax.set_xlabel("calibration iterations")
    ax.set_ylabel("final hard loss")
    ax.legend()
    fig.tight_layout()
    _finish(fig, path)


def plot_stack(rows, path) -> None:
    """Bar chart of block-output MSE per pipeline stage."""
    fig, ax = plt.subplots(figsize=(6, 4))
    labels = [r[0] for r in rows]
    ax.bar(range(len(rows)), [r[1] for r in rows], color="tab:blue")
    ax.set_xticks(range(len(rows)), labels, rotation=20)
    ax.set_ylabel("block-output MSE")
    fig.tight_layout()
    _finish(fig, path)


def plot_cost(named_reports, path) -> None:
    """Grouped bars: model size (MB) and BOPs relative to the first entry."""
    names = [n for n, _ in named_reports]
    sizes = [r.model_size_mb for _, r in named_reports]
    base_bops = named_reports[0][1].bops
    ratios = [r.bops / base_bops for _, r in named_reports]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.5))
    ax1.bar(range(len(names)), sizes, color="tab:blue")
    ax1.set_xticks(range(len(names)), names, rotation=20)
    ax1.set_ylabel("model size (MB)")
    ax2.bar(range(len(names)), ratios, color="tab:orange")
    ax2.set_xticks(range(len(names)), names, rotation=20)
    ax2.set_ylabel("BOPs / baseline")
    fig.tight_layout()
    _finish(fig, path)


def plot_loss_history(histories: dict, path) -> None:
    """Soft-loss trajectories of calibration runs, one line per layer/block."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, hist in histories.items():
        if len(hist):
            ax.plot(hist, label=name, linewidth=1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("reconstruction loss")
    ax.set_yscale("log")
    if histories:
        ax.legend(fontsize=7, ncols=2)
    fig.tight_layout()
    _finish(fig, path)
