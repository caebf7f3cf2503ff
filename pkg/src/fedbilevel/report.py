"""Figure rendering for experiment outputs.

Renders convergence and summary figures to files next to the delimited
logs. Uses the non-interactive backend so it works headless; all figure
functions take already-loaded records and return the written path.
"""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def _series(records, attr):
    ts, vals = [], []
    for rec in records:
        value = getattr(rec, attr)
        if value is None or (isinstance(value, float) and math.isnan(value)):
            continue
        ts.append(rec.t)
        vals.append(value)
    return ts, vals


def render_run_figure(records, path, title: str = ""):
    """Convergence curves of one run: gradient norm, consensus, outer loss."""
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.2))
    panels = (
        ("grad_norm_sq", "squared hypergrad norm", True),
        ("consensus_error", "consensus error", True),
        ("outer_loss", "outer loss", False),
    )
    for ax, (attr, label, logy) in zip(axes, panels):
        ts, vals = _series(records, attr)
        if ts:
            if logy and all(v > 0 for v in vals):
                ax.semilogy(ts, vals)
            else:
                ax.plot(ts, vals)
        ax.set_xlabel("step")
        ax.set_title(label, fontsize=10)
        ax.grid(True, alpha=0.3)
    if title:
        fig.suptitle(title, fontsize=11)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_sweep_figure(all_records, path, title: str = ""):
    """Overlay of gradient-norm curves across a seed sweep."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, records in all_records:
        ts, vals = _series(records, "grad_norm_sq")
        if ts and all(v > 0 for v in vals):
            ax.semilogy(ts, vals, label=str(label), alpha=0.8)
        elif ts:
            ax.plot(ts, vals, label=str(label), alpha=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("squared hypergrad norm")
    if title:
        ax.set_title(title, fontsize=11)
    if len(all_records) <= 12:
        ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_summary_figure(rows, path, title: str = ""):
    """Bar chart of summary metrics (mean with std whiskers)."""
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(rows)), 4))
    labels = [f"{r.method}\n{r.metric}" for r in rows]
    means = [r.mean for r in rows]
    stds = [r.std for r in rows]
    ax.bar(range(len(rows)), means, yerr=stds, capsize=4, color="tab:blue", alpha=0.8)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, fontsize=8)
    if title:
        ax.set_title(title, fontsize=11)
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
