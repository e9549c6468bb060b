"""Optional PNG figures rendered from the same rows the CLI writes as CSV."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def ser_figure(rows, path: Path) -> Path:
    """Semilog SER-vs-SNR curves, one line per estimator, with CI bars."""
    fig, ax = plt.subplots(figsize=(6.4, 4.8))
    estimators = list(dict.fromkeys(r["estimator"] for r in rows))
    for est in estimators:
        pts = [r for r in rows if r["estimator"] == est and r["ser"] > 0 and r["snr_db"] != float("inf")]
        if not pts:
            continue
        x = [r["snr_db"] for r in pts]
        y = [r["ser"] for r in pts]
        lo = [r["ser"] - r["ci_low"] for r in pts]
        hi = [r["ci_high"] - r["ser"] for r in pts]
        ax.errorbar(x, y, yerr=[lo, hi], marker="o", ms=3, capsize=2, label=est)
    ax.set_yscale("log")
    ax.set_xlabel("SNR (dB)")
    ax.set_ylabel("SER")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def throughput_figure(channel_rows, path: Path) -> Path:
    """Per-channel throughput (Mb/s), averaged over seeds, grouped by selection policy."""
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    policies = list(dict.fromkeys(r["selection"] for r in channel_rows))
    channels = sorted({r["channel"] for r in channel_rows})
    width = 0.8 / max(1, len(policies))
    for i, pol in enumerate(policies):
        means = []
        for c in channels:
            vals = [r["throughput_bps"] for r in channel_rows if r["selection"] == pol and r["channel"] == c]
            means.append(sum(vals) / len(vals) / 1e6 if vals else 0.0)
        ax.bar([c + (i - (len(policies) - 1) / 2) * width for c in channels], means, width, label=pol)
    ax.set_xlabel("channel")
    ax.set_ylabel("throughput (Mb/s)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def complexity_figure(rows, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    names = [r["estimator"] for r in rows]
    ax.bar(names, [r["complex_mults"] for r in rows])
    ax.set_ylabel("complex multiplications per estimate")
    ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
