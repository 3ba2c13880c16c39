"""Static figures written next to the CSV outputs (Agg backend, files only)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_trajectories(ensemble, grid, path, n=20):
    X, Q = ensemble.X, ensemble.Q
    panels = 1 if Q is None else 2
    fig, axes = plt.subplots(panels, 1, figsize=(7, 3 * panels), squeeze=False)
    for i in range(min(n, X.shape[0])):
        axes[0, 0].plot(grid.times, X[i, :, 0], lw=0.7)
        if Q is not None:
            axes[1, 0].plot(grid.times, Q[i, :, 0], lw=0.7)
    axes[0, 0].set_ylabel("X_1")
    if Q is not None:
        axes[1, 0].set_ylabel("Q_1")
    axes[-1, 0].set_xlabel("t")
    return _save(fig, path)


def plot_solution(rows, path):
    r = np.asarray(rows, float)
    fig, ax = plt.subplots(1, 2, figsize=(9, 3.2))
    ax[0].plot(r[:, 0], r[:, 1], label="mean Y")
    ax[0].fill_between(r[:, 0], r[:, 1] - r[:, 2], r[:, 1] + r[:, 2], alpha=0.3)
    ax[0].set_xlabel("t")
    ax[0].legend()
    for j, name in enumerate(("|Z|", "|Xi|", "|U|", "|Theta|")):
        ax[1].plot(r[:-1, 0], r[:-1, 3 + j], label=name)
    ax[1].set_xlabel("t")
    ax[1].legend()
    return _save(fig, path)


def plot_sweep(result, path):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    e = np.array(result.epsilons)
    ax.errorbar(e, result.gaps, yerr=3 * np.array(result.combined_se), marker="o", capsize=3)
    ax.axhline(result.tol, ls="--", c="grey", label="tol")
    ax.set_xscale("log")
    ax.set_xlabel("epsilon")
    ax.set_ylabel("|Y0_eps - Ybar0|")
    ax.legend()
    return _save(fig, path)


def plot_lambda(lm, path):
    """``lambda`` along each live axis of a cached map, other axes at their midpoint."""
    live = [i for i, a in enumerate(lm.axes) if a.size > 1]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    names = [f"x{i + 1}" for i in range(lm.dx)] + [f"z{i + 1}" for i in range(lm.dx)] + \
        [f"u{i + 1}" for i in range(lm.m1)]
    for i in live:
        idx = [a.size // 2 for a in lm.axes]
        idx[i] = slice(None)
        ax.plot(lm.axes[i], lm.values[tuple(idx)], marker=".", label=names[i])
    ax.set_ylabel("lambda")
    if live:
        ax.legend()
    return _save(fig, path)


def plot_dyadic(rows, path):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    N = [r.N for r in rows]
    for attr in ("delta_x", "delta_z", "delta_u"):
        ax.semilogy(N, [max(getattr(r, attr), 1e-300) for r in rows], marker="o", label=attr)
    ax.set_xlabel("N")
    ax.legend()
    return _save(fig, path)


def plot_dual(result, path):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.hist([s.value for s in result.schedules], bins=30)
    ax.axvline(result.y_bar, c="k", ls="--", label="Ybar0")
    ax.set_xlabel("schedule value")
    ax.legend()
    return _save(fig, path)


def plot_values(result, path):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    names = [p.name for p in result.policies]
    ax.errorbar(range(len(names)), [p.value for p in result.policies],
                yerr=[3 * p.se for p in result.policies], fmt="o", capsize=3)
    ax.axhline(result.bsde, c="k", ls="--", label="BSDE")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, fontsize=8)
    ax.legend()
    return _save(fig, path)


def plot_weights(log_weights, path):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for label, lw in log_weights.items():
        ax.hist(lw, bins=60, histtype="step", label=label)
    ax.set_xlabel("log weight at T")
    ax.legend(fontsize=8)
    return _save(fig, path)
