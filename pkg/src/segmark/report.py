"""Figure rendering for sweep, attack, and timing reports.

CSV/JSON remain the machine contract; these are the human-readable views
written alongside them by the CLI report paths.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .attacks import EvalReport


def save_capacity_figure(report: EvalReport, path) -> None:
    """Tokens/bit and per-bit accuracy against the confidence level."""
    aggs = sorted(report.aggregates, key=lambda a: a["group"])
    alphas = [a["group"] for a in aggs]
    tpb = [a["mean_tokens_per_bit"] for a in aggs]
    acc = [a["mean_bit_accuracy"] for a in aggs]

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(alphas, tpb, "o-")
    ax1.set_xlabel("confidence level")
    ax1.set_ylabel("tokens per bit")
    ax1.grid(alpha=0.3)
    ax2.plot(alphas, acc, "s-", color="tab:green")
    ax2.set_xlabel("confidence level")
    ax2.set_ylabel("per-bit accuracy")
    ax2.set_ylim(min(0.5, min(acc) - 0.05), 1.02)
    ax2.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_attack_figure(report: EvalReport, path) -> None:
    """DP vs boundary-replay accuracy per attack setting."""
    aggs = report.aggregates
    labels = [str(a["group"]) for a in aggs]
    dp = [a["mean_dp_accuracy"] for a in aggs]
    nv = [a["mean_naive_accuracy"] for a in aggs]
    x = np.arange(len(labels))

    fig, ax = plt.subplots(figsize=(max(4.5, 1.5 * len(labels)), 3.5))
    width = 0.38
    ax.bar(x - width / 2, dp, width, label="DP extraction")
    ax.bar(x + width / 2, nv, width, label="boundary replay")
    ax.set_xticks(x)
    ax.set_xticklabels(labels)
    ax.set_ylabel("per-bit accuracy")
    ax.set_ylim(0, 1.05)
    ax.legend()
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_timing_figure(timing: dict, path) -> None:
    """Generation overhead bars plus extraction scaling on log-log axes."""
    has_extract = bool(timing.get("extract_medians"))
    fig, axes = plt.subplots(1, 2 if has_extract else 1,
                             figsize=(9 if has_extract else 4.5, 3.5))
    ax0 = axes[0] if has_extract else axes
    ax0.bar(["raw", "watermarked"],
            [timing["raw_generate_median"], timing["watermarked_generate_median"]],
            color=["tab:gray", "tab:blue"])
    ax0.set_ylabel("median seconds per run")
    ax0.set_title(f"overhead ratio {timing['overhead_ratio']:.3f}")
    ax0.grid(axis="y", alpha=0.3)
    if has_extract:
        ns = sorted(timing["extract_medians"])
        ts = [timing["extract_medians"][n] for n in ns]
        axes[1].loglog(ns, ts, "o-")
        axes[1].set_xlabel("text length")
        axes[1].set_ylabel("median extract seconds")
        axes[1].grid(which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
