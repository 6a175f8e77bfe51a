"""Figure rendering for benchmark and probe reports.

Figures land next to the JSON/JSONL outputs so a report directory is
self-contained. Uses the Agg backend; nothing here needs a display.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def render_bench_figures(report, out_prefix) -> list:
    """Latency histogram and summary panel for one benchmark run."""
    out_prefix = Path(out_prefix)
    fig, (ax_hist, ax_text) = plt.subplots(
        1, 2, figsize=(10, 4), gridspec_kw={"width_ratios": [3, 1]}
    )
    lat = np.asarray(report.latencies_ms)
    ax_hist.hist(lat, bins=min(40, max(10, len(lat) // 5)), color="#4878d0")
    ax_hist.axvline(report.p50_latency_ms, color="k", ls="--", lw=1, label="p50")
    ax_hist.axvline(report.p99_latency_ms, color="r", ls="--", lw=1, label="p99")
    ax_hist.set_xlabel("per-patch latency [ms]")
    ax_hist.set_ylabel("patches")
    ax_hist.set_title(f"{report.n_patches} patches, concurrency {report.concurrency}")
    ax_hist.legend()
    ax_text.axis("off")
    ax_text.text(
        0.0,
        0.9,
        "\n".join(
            [
                f"patches/s: {report.patches_per_sec:.1f}",
                f"wall: {report.wall_time_s:.2f} s",
                f"p50: {report.p50_latency_ms:.1f} ms",
                f"p99: {report.p99_latency_ms:.1f} ms",
                f"cache hits: {report.cache_hit_rate:.1%}",
            ]
        ),
        va="top",
        family="monospace",
    )
    fig.tight_layout()
    path = out_prefix.with_name(out_prefix.name + "_latency.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return [path]


def render_probe_figures(result, out_prefix) -> list:
    """Per-run accuracy bars plus validation curves across epochs."""
    out_prefix = Path(out_prefix)
    fig, (ax_bar, ax_curve) = plt.subplots(1, 2, figsize=(10, 4))
    accs = [r.balanced_accuracy for r in result.runs]
    ax_bar.bar(range(len(accs)), accs, color="#4878d0")
    ax_bar.axhline(result.mean, color="k", ls="--", lw=1, label="mean")
    ax_bar.set_xlabel("run")
    ax_bar.set_ylabel("balanced accuracy")
    ax_bar.set_ylim(0.0, 1.05)
    ax_bar.set_title(f"mean {result.mean:.4f} +- {result.std:.4f}")
    ax_bar.legend()
    for i, run in enumerate(result.runs):
        ax_curve.plot(
            range(1, len(run.val_history) + 1), run.val_history, label=f"run {i}"
        )
    ax_curve.set_xlabel("epoch")
    ax_curve.set_ylabel("val balanced accuracy")
    ax_curve.set_title("validation over training")
    if result.runs:
        ax_curve.legend(fontsize=8)
    fig.tight_layout()
    path = out_prefix.with_name(out_prefix.name + "_probe.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return [path]
