"""Diagnostic figures for experiment reports.

Each renderer takes the result object produced by the corresponding
runner in :mod:`otinfer.harness` and writes a single PNG next to the
delimited output. The functions return the written path so callers can
log it. Rendering is optional at the CLI level; the data needed to
regenerate any figure is always present in the CSV.
"""

from __future__ import annotations

import os

import matplotlib
import numpy as np

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

__all__ = ["render_rates", "render_coverage", "render_stability"]

_DPI = 150


def render_rates(result, out_dir):
    """Plot log2 mean risk against log2 n with the fitted slope line.

    Parameters
    ----------
    result : RateResult
        Output of ``run_rates``.
    out_dir : str
        Directory for ``rates.png``.

    Returns
    -------
    str
        Path of the written figure.
    """
    ns = np.asarray(result.n_values, dtype=float)
    means = np.asarray(result.mean_risk, dtype=float)
    ses = np.asarray(result.se_risk, dtype=float)

    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    if result.degenerate:
        ax.axhline(0.0, color="0.4", lw=1.0)
        ax.set_title("%s: degenerate (risk at floor)" % result.estimator)
        ax.set_xlabel("n")
    else:
        x = np.log2(ns)
        y = np.log2(means)
        # one-sided bars in log space; clip the lower arm when SE >= mean
        lo = np.where(ses < means, y - np.log2(means - ses), 1.0)
        hi = np.log2(means + ses) - y
        ax.errorbar(x, y, yerr=[lo, hi], fmt="o", ms=4, capsize=3,
                    color="C0", label="mean risk")
        if result.slope is not None:
            yfit = y.mean() + result.slope * (x - x.mean())
            ax.plot(x, yfit, "-", color="C1", lw=1.2,
                    label="fit %.3f +/- %.3f" % (result.slope, result.slope_se))
        t = result.target_exponent
        ax.plot(x, y[0] + t * (x - x[0]), "--", color="0.6", lw=1.0,
                label="target %.3f" % t)
        ax.set_xlabel("log2 n")
        ax.set_ylabel("log2 mean risk")
        ax.set_title("%s, d=%d" % (result.estimator, result.d))
        ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    path = os.path.join(out_dir, "rates.png")
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def render_coverage(result, out_dir):
    """Plot every interval against the true value, grouped by n.

    Covered intervals draw in blue, misses in red; the dashed line marks
    the true squared distance. Writes ``coverage.png``.
    """
    rows = result.rows
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    pos = 0
    ticks, labels = [], []
    for n in result.n_values:
        grp = [r for r in rows if r["n"] == n]
        start = pos
        for r in grp:
            color = "C0" if r["covered"] else "C3"
            ax.plot([pos, pos], [r["lo"], r["hi"]], color=color, lw=1.0)
            pos += 1
        ticks.append((start + pos - 1) / 2.0)
        labels.append("n=%d\ncov %.2f" % (n, result.coverage[n]))
        pos += 3  # gap between groups
    ax.axhline(result.w2sq_true, color="0.2", lw=1.0, ls="--")
    ax.set_xticks(ticks)
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylabel("interval")
    ax.set_title("%s plugin, level %.2f" % (result.plugin, result.level))
    fig.tight_layout()
    path = os.path.join(out_dir, "coverage.png")
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def render_stability(result, out_dir):
    """Scatter both sandwich residuals per replication.

    The zero line is the theoretical floor for each residual; points
    below it would witness a violated bound. Writes ``stability.png``.
    """
    rows = result.rows
    reps = np.array([r["rep"] for r in rows])
    low = np.array([r["lower_residual"] for r in rows])
    up = np.array([r["upper_residual"] for r in rows])

    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    ax.plot(reps, low, "o", ms=4, color="C0", label="lower residual")
    ax.plot(reps, up, "s", ms=4, color="C2", label="upper residual")
    ax.axhline(0.0, color="0.2", lw=1.0)
    ax.set_xlabel("replication")
    ax.set_ylabel("residual")
    ax.set_title("%s, n=%d, lambda=%.4f" % (result.mode, result.n, result.lam))
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    path = os.path.join(out_dir, "stability.png")
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path
