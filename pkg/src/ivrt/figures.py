"""Matplotlib renderings written next to the delimited report output."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .mte import WeightFn, merge_breaks
from .rt import FrontierCurve


def plot_weight_functions(fns: dict[str, WeightFn], path, title="MTE weights"):
    fig, ax = plt.subplots(figsize=(7, 4.5))
    grid = merge_breaks(*fns.values())
    for name, fn in fns.items():
        vals = fn.on_grid(grid).values
        ax.stairs(vals, grid, label=name, baseline=None)
    ax.axhline(0.0, color="black", lw=0.6)
    ax.set_xlabel("latent resistance u")
    ax.set_ylabel("weight")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_frontier(curve: FrontierCurve, marks: dict[str, tuple[float, float]], path):
    """Frontier variance against the target, with named estimator points."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(curve.grid, curve.v_min, color="tab:blue", label="frontier")
    for name, (target, variance) in marks.items():
        ax.scatter([target], [variance], zorder=5, label=name)
    ax.set_xlabel("target estimand")
    ax.set_ylabel("asymptotic variance")
    ax.set_title("Variance frontier")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_wald_forest(wald, se, combined: dict[str, tuple[float, float]], path):
    """Per-instrument Wald estimates with 95% bars, plus combined estimates."""
    wald = np.asarray(wald, dtype=float)
    se = np.asarray(se, dtype=float)
    L = wald.size
    labels = [f"z{l + 1}" for l in range(L)] + list(combined)
    est = np.r_[wald, [v for v, _ in combined.values()]]
    err = 1.96 * np.r_[se, [s for _, s in combined.values()]]
    y = np.arange(len(labels))[::-1]
    fig, ax = plt.subplots(figsize=(7, 0.5 * len(labels) + 1.5))
    colors = ["tab:blue"] * L + ["tab:red"] * len(combined)
    ax.errorbar(est, y, xerr=err, fmt="o", ecolor="gray", markersize=4, ls="none")
    for yi, xi, c in zip(y, est, colors):
        ax.plot([xi], [yi], "o", color=c, markersize=5)
    ax.set_yticks(y)
    ax.set_yticklabels(labels)
    ax.set_xlabel("estimate")
    ax.set_title("Instrument-specific and combined estimates")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
