"""Figure rendering for sweep and comparison results.

Renders matplotlib figures to files next to the delimited outputs; the
data path (CSV/JSON) never depends on these. Uses the Agg backend so
report generation works headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from quantnoise.metric import SweepResult, logistic  # noqa: E402


def plot_sweep(sweep: SweepResult, fit_dict: dict | None, out_png: str) -> str:
    """Accuracy vs sigma on a log x axis, with the fitted curve overlaid.

    A sigma = 0 anchor point, having no place on a log axis, is drawn at
    half the smallest positive sigma with an open marker.
    """
    sig = sweep.sigmas
    y = sweep.means()
    dy = sweep.stds()
    pos = sig > 0
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    ax.errorbar(sig[pos], y[pos], yerr=dy[pos], fmt="o", ms=4, lw=1,
                capsize=2, label="observed accuracy")
    if np.any(~pos):
        anchor = sig[pos].min() / 2 if np.any(pos) else 1e-3
        ax.errorbar([anchor], y[~pos], yerr=dy[~pos], fmt="o", ms=5,
                    mfc="none", lw=1, capsize=2, label="sigma = 0 anchor")
    if fit_dict is not None:
        grid = np.geomspace(max(sig[pos].min() * 0.5, 1e-6),
                            sig[pos].max() * 1.5, 300)
        curve = logistic(grid, fit_dict["mu"], fit_dict["s"], fit_dict["da"],
                         fit_dict["a_min"])
        ax.plot(grid, curve, "-", lw=1.2, label="logistic fit")
        ax.axvline(fit_dict["mu"], color="gray", lw=0.8, ls="--")
        ax.annotate(f"mu = {fit_dict['mu']:.3g}",
                    (fit_dict["mu"], fit_dict["a_min"] + fit_dict["da"]),
                    textcoords="offset points", xytext=(4, 4), fontsize=8)
    ax.set_xscale("log")
    ax.set_xlabel("noise sigma")
    ax.set_ylabel("test accuracy")
    md = sweep.metadata
    title = str(md.get("model_id", ""))
    if md.get("quant_mode", "off") != "off":
        title += f"  [{md['quant_mode']} {md.get('bit_width', '')}b " \
                 f"s={md.get('scale_factor', '')}]"
    ax.set_title(title.strip(), fontsize=9)
    ax.legend(fontsize=7)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)
    return out_png


def plot_tradeoff(rows, out_png: str) -> str:
    """Peak accuracy vs midpoint noise level, Pareto front highlighted.

    `rows` are TradeoffRow-like objects (label, peak_accuracy, mu,
    mu_std, on_front).
    """
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    front = [r for r in rows if r.on_front]
    rest = [r for r in rows if not r.on_front]
    if rest:
        ax.errorbar([r.mu for r in rest], [r.peak_accuracy for r in rest],
                    xerr=[r.mu_std for r in rest], fmt="o", ms=5, capsize=2,
                    color="tab:gray", label="dominated")
    if front:
        fr = sorted(front, key=lambda r: r.mu)
        ax.errorbar([r.mu for r in fr], [r.peak_accuracy for r in fr],
                    xerr=[r.mu_std for r in fr], fmt="o-", ms=6, lw=1,
                    capsize=2, color="tab:blue", label="Pareto front")
    for r in rows:
        ax.annotate(r.label, (r.mu, r.peak_accuracy), fontsize=7,
                    textcoords="offset points", xytext=(4, 3))
    ax.set_xlabel("midpoint noise level mu")
    ax.set_ylabel("peak accuracy")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)
    return out_png


def plot_history(rows: list[dict], out_png: str) -> str:
    """Training curves from a history CSV."""
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    ep = [r["epoch"] for r in rows]
    ax.plot(ep, [r["train_acc"] for r in rows], label="train accuracy")
    ax.plot(ep, [r["test_acc"] for r in rows], label="test accuracy")
    if any(r["test_acc_noisy"] != r["test_acc"] for r in rows):
        ax.plot(ep, [r["test_acc_noisy"] for r in rows],
                label="test accuracy (matched noise)")
    ax2 = ax.twinx()
    ax2.plot(ep, [r["train_loss"] for r in rows], color="tab:red", lw=0.8,
             alpha=0.6)
    ax2.set_ylabel("train loss", color="tab:red", fontsize=8)
    ax.set_xlabel("epoch")
    ax.set_ylabel("accuracy")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7, loc="lower right")
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)
    return out_png
