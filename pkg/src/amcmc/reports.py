"""Figure rendering for run artifacts.

Every CLI run that produces a delimited trace also renders the matching
figure next to it, headless.  Figures are presentation artifacts: the CSVs
stay the byte-deterministic source of record.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

FIG_DPI = 150


def _save(fig, path: str):
    fig.savefig(path, dpi=FIG_DPI, bbox_inches="tight")
    plt.close(fig)


def render_density_fit(path: str, samples: np.ndarray, target, lo=-8.0, hi=8.0):
    """Histogram of 1-D sampler output against the target density curve."""
    z = np.asarray(samples).ravel()
    grid = np.linspace(lo, hi, 400)
    density = np.exp(target.log_density_batch(grid[:, None]))
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.hist(z, bins=80, density=True, alpha=0.55, color="tab:blue", label="sampler")
    ax.plot(grid, density, color="tab:red", lw=1.8, label="target")
    ax.set_xlabel("z")
    ax.set_ylabel("density")
    ax.legend(frameon=False)
    _save(fig, path)


def render_trace(path: str, iterations, values, ylabel: str, logy: bool = False):
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.plot(iterations, values, lw=1.2)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel(ylabel)
    _save(fig, path)


def render_sweep(path: str, summary_rows: list[dict]):
    """Mean +/- std of final KSD per (T, eta) setting."""
    labels = [f"T={int(r['T'])}, eta={r['eta']:g}" for r in summary_rows]
    means = [r["mean_final_ksd"] for r in summary_rows]
    stds = [r["std_final_ksd"] for r in summary_rows]
    fig, ax = plt.subplots(figsize=(6, 3.2))
    x = np.arange(len(labels))
    ax.errorbar(x, means, yerr=stds, fmt="o-", capsize=4)
    ax.set_xticks(x)
    ax.set_xticklabels(labels)
    ax.set_ylabel("final KSD")
    ax.set_yscale("log")
    _save(fig, path)


def render_bnn_tradeoff(path: str, rows: list[dict]):
    """Wall-clock versus predictive quality, one marker per method."""
    methods = sorted({r["method"] for r in rows})
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
    for method in methods:
        sub = [r for r in rows if r["method"] == method]
        t = np.mean([r["seconds"] for r in sub])
        ll = np.mean([r["test_ll"] for r in sub])
        err = np.mean([r["test_error"] for r in sub])
        axes[0].scatter(t, -ll, label=method)
        axes[1].scatter(t, err, label=method)
    for ax, ylabel in zip(axes, ("negative test LL", "test error")):
        ax.set_xscale("log")
        ax.set_xlabel("seconds (log scale)")
        ax.set_ylabel(ylabel)
    axes[0].legend(frameon=False, fontsize=8)
    _save(fig, path)


def render_kl_traces(path: str, traces: list[list[float]]):
    fig, ax = plt.subplots(figsize=(6, 3.2))
    for trace in traces:
        ax.plot(trace, lw=0.8, alpha=0.7)
    ax.set_xlabel("step")
    ax.set_ylabel("KL to stationary")
    ax.set_yscale("log")
    _save(fig, path)
