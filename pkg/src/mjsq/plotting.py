"""Figure rendering for CLI reports (PNG, headless)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)
    return path


def gap_means_figure(path: Path, estimate, half_width, exact=None, title: str = "") -> Path:
    """Time-averaged gap means with CIs, against exact means when available."""
    i = np.arange(1, len(estimate) + 1)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.errorbar(i, estimate, yerr=half_width, fmt="o", ms=3, capsize=2, label="simulated")
    if exact is not None:
        ax.plot(i, exact, "-", lw=1, label="exact")
    ax.set_xlabel("gap index")
    ax.set_ylabel("mean gap")
    ax.set_title(title)
    ax.legend()
    return _save(fig, path)


def rho_figure(path: Path, rho, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(np.arange(1, len(rho) + 1), rho, lw=1)
    ax.set_xlabel("index i")
    ax.set_ylabel("rho_i")
    ax.set_title(title)
    return _save(fig, path)


def marginal_figure(path: Path, samples: dict, cdfs: dict, title: str = "") -> Path:
    """Empirical vs target CDFs; ``samples[label]`` arrays and ``cdfs[label]`` callables."""
    fig, axes = plt.subplots(1, len(samples), figsize=(4 * len(samples), 3.2), squeeze=False)
    for ax, (label, s) in zip(axes[0], samples.items()):
        s = np.sort(np.asarray(s))
        ax.step(s, np.arange(1, s.size + 1) / s.size, where="post", lw=1, label="empirical")
        grid = np.linspace(0, s[-1], 200)
        ax.plot(grid, cdfs[label](grid), "--", lw=1, label="target")
        ax.set_title(label)
        ax.legend(fontsize=7)
    fig.suptitle(title)
    return _save(fig, path)


def comparison_figure(path: Path, rows, metric: str = "average") -> Path:
    """Bar chart of one metric across policies with CIs."""
    sel = [r for r in rows if r.metric == metric]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    x = np.arange(len(sel))
    ax.bar(x, [r.estimate for r in sel], yerr=[r.half_width for r in sel], capsize=3)
    for j, r in enumerate(sel):
        if r.predicted is not None:
            ax.plot([j - 0.4, j + 0.4], [r.predicted] * 2, "k--", lw=1)
    ax.set_xticks(x, [r.policy for r in sel])
    ax.set_ylabel(metric)
    return _save(fig, path)


def convergence_figure(path: Path, dts, values, xlabel: str = "dt", ylabel: str = "sup gap discrepancy") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.loglog(dts, values, "o-")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    return _save(fig, path)
