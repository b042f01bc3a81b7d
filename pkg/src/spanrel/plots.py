"""Figure rendering for benchmark and window-sweep reports.

Kept separate from the CLI report logic: the delimited output is the record,
these PNGs are the companion pictures. Uses the Agg backend so rendering
works headless.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

__all__ = ["plot_benchmark", "plot_window_sweep"]


def plot_benchmark(rows: Sequence[Mapping], out_path) -> None:
    """Bar panels for throughput and encoder passes, one bar per mode."""
    modes = [str(r["mode"]) for r in rows]
    fig, (ax_tp, ax_ep) = plt.subplots(1, 2, figsize=(8, 3.5))
    ax_tp.bar(modes, [r["sentences_per_sec"] for r in rows], color="#4878d0")
    ax_tp.set_ylabel("sentences / sec")
    ax_tp.set_title("throughput")
    ax_ep.bar(modes, [r["encoder_passes"] for r in rows], color="#ee854a")
    ax_ep.set_ylabel("encoder passes")
    ax_ep.set_title("encoder work")
    for ax in (ax_tp, ax_ep):
        ax.spines["top"].set_visible(False)
        ax.spines["right"].set_visible(False)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_window_sweep(rows: Sequence[Mapping], out_path) -> None:
    """Relation F1 against context-window size ("bare" plotted first)."""
    labels = [str(r["window"]) for r in rows]
    xs = range(len(rows))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(xs, [r["rel_f1"] for r in rows], marker="o", label="Rel F1")
    ax.plot(xs, [r["relplus_f1"] for r in rows], marker="s", label="Rel+ F1")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(labels)
    ax.set_xlabel("context window (tokens)")
    ax.set_ylabel("F1")
    ax.set_ylim(0.0, 1.05)
    ax.legend(frameon=False)
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
