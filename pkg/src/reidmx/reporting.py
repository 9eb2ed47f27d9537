"""Report writers: delimited tables, JSON, and the matching figures.

Every report lands in up to three forms next to each other: a CSV for
tables, a JSON blob for machines, and a rendered PNG for eyeballs.
All writes are atomic.  Figures use the Agg backend so nothing here
needs a display.
"""

from __future__ import annotations

import csv
import io as _stdio
import json

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .io import atomic_write_bytes

__all__ = ["write_csv", "write_json", "plot_loss_curve", "plot_eval_bars",
           "plot_size_bars", "plot_bench_bars"]

_DPI = 150


def write_csv(path: str, header: list, rows: list) -> None:
    buf = _stdio.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


def write_json(path: str, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n")
                       .encode("utf-8"))


def _save(fig, path: str) -> None:
    buf = _stdio.BytesIO()
    fig.savefig(buf, format="png", dpi=_DPI, bbox_inches="tight")
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


def plot_loss_curve(history: list[dict], path: str) -> None:
    """Mean epoch loss over training, log-scaled learning rate inset."""
    epochs = [row["epoch"] for row in history]
    losses = [row["mean_loss"] for row in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, losses, marker="o", markersize=3, color="tab:blue")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean batch-hard loss")
    ax.set_title("training loss")
    ax.grid(True, alpha=0.3)
    _save(fig, path)


def plot_eval_bars(reports: list, path: str) -> None:
    """Grouped bars of CMC rates and mAP per evaluation variant."""
    if not reports:
        return
    ranks = sorted(reports[0].cmc)
    metrics = [f"CMC-{k}" for k in ranks] + ["mAP"]
    fig, ax = plt.subplots(figsize=(1.8 + 1.4 * len(metrics), 4))
    width = 0.8 / len(reports)
    for vi, rep in enumerate(reports):
        values = [rep.cmc[k] for k in ranks] + [rep.mean_ap]
        xs = [m + vi * width for m in range(len(metrics))]
        ax.bar(xs, values, width=width,
               label=f"{rep.variant} ({rep.precision_mode.value})")
    ax.set_xticks([m + width * (len(reports) - 1) / 2 for m in range(len(metrics))])
    ax.set_xticklabels(metrics)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("rate")
    ax.set_title("retrieval quality")
    ax.legend()
    ax.grid(True, axis="y", alpha=0.3)
    _save(fig, path)


def plot_size_bars(rows: list[dict], path: str) -> None:
    """Model bytes under the binary32 and partitioned plans."""
    if not rows:
        return
    names = [r["model"] for r in rows]
    full = [r["binary32_mb"] for r in rows]
    mixed = [r["partitioned_mb"] for r in rows]
    xs = range(len(names))
    fig, ax = plt.subplots(figsize=(2 + 1.6 * len(names), 4))
    ax.bar([x - 0.2 for x in xs], full, width=0.4, label="binary32")
    ax.bar([x + 0.2 for x in xs], mixed, width=0.4, label="partitioned")
    for x, (f, m) in zip(xs, zip(full, mixed)):
        ax.text(x + 0.2, m, f"/{f / m:.2f}", ha="center", va="bottom", fontsize=8)
    ax.set_xticks(list(xs))
    ax.set_xticklabels(names, rotation=15, ha="right")
    ax.set_ylabel("model size (MB)")
    ax.set_title("serialized size by precision plan")
    ax.legend()
    ax.grid(True, axis="y", alpha=0.3)
    _save(fig, path)


def plot_bench_bars(rows: list[dict], path: str) -> None:
    """Median distance-matrix wall time per precision mode."""
    if not rows:
        return
    names = [r["mode"] for r in rows]
    med = [r["median_seconds"] for r in rows]
    lo = [r["median_seconds"] - r["min_seconds"] for r in rows]
    hi = [r["max_seconds"] - r["median_seconds"] for r in rows]
    xs = range(len(names))
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.bar(xs, med, yerr=[lo, hi], capsize=4, width=0.5, color="tab:purple")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(names)
    ax.set_ylabel("seconds (median, min/max whiskers)")
    ax.set_title("distance matrix timing")
    ax.grid(True, axis="y", alpha=0.3)
    _save(fig, path)
