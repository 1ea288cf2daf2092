"""Render metrics files into figures and a delimited summary table.

Takes one or more per-epoch metrics files, writes PNG curves (accuracy,
losses, replacement probability) and a tab-separated summary with one row
per input file, all into the same output directory.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .metrics import MetricsRecord, read_metrics

SUMMARY_COLUMNS = ("label", "epochs", "final_acc", "best_acc", "final_off_err",
                   "final_l_total", "mean_wall_s")


def _label_for(path: str) -> str:
    base = os.path.basename(path)
    stem = os.path.splitext(base)[0]
    if stem == "metrics":
        parent = os.path.basename(os.path.dirname(os.path.abspath(path)))
        return parent or stem
    return stem


def summarize_run(label: str, records: list[MetricsRecord]) -> dict:
    if not records:
        raise ValueError(f"no metrics records for {label}")
    return {
        "label": label,
        "epochs": len(records),
        "final_acc": records[-1].acc,
        "best_acc": max(r.acc for r in records),
        "final_off_err": records[-1].off_err,
        "final_l_total": records[-1].l_total,
        "mean_wall_s": sum(r.wall_s for r in records) / len(records),
    }


def write_summary(rows: list[dict], path: str):
    """One tab-separated row per run, with a header line."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("\t".join(SUMMARY_COLUMNS) + "\n")
        for row in rows:
            cells = []
            for col in SUMMARY_COLUMNS:
                value = row[col]
                cells.append(f"{value:.6f}" if isinstance(value, float) else str(value))
            f.write("\t".join(cells) + "\n")


def _curve_figure(runs: list[tuple[str, list[MetricsRecord]]], field: str,
                  title: str, ylabel: str, path: str):
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for label, records in runs:
        epochs = [r.epoch for r in records]
        ax.plot(epochs, [getattr(r, field) for r in records], label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    if len(runs) > 1:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _loss_figure(runs: list[tuple[str, list[MetricsRecord]]], path: str):
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for label, records in runs:
        epochs = [r.epoch for r in records]
        ax.plot(epochs, [r.l_total for r in records], label=f"{label} total")
        ax.plot(epochs, [r.l_track for r in records], ":", label=f"{label} track")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title("training loss")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_report(metrics_paths: list[str], out_dir: str) -> list[str]:
    """Write summary.tsv plus curve PNGs for the given metrics files.

    Returns the list of files written.
    """
    if not metrics_paths:
        raise ValueError("no metrics files given")
    os.makedirs(out_dir, exist_ok=True)
    runs = [(_label_for(p), read_metrics(p)) for p in metrics_paths]
    for label, records in runs:
        if not records:
            raise ValueError(f"metrics file for {label} has no complete records")

    written = []
    summary_path = os.path.join(out_dir, "summary.tsv")
    write_summary([summarize_run(label, recs) for label, recs in runs], summary_path)
    written.append(summary_path)

    acc_path = os.path.join(out_dir, "accuracy.png")
    _curve_figure(runs, "acc", "held-out cell accuracy", "accuracy", acc_path)
    written.append(acc_path)

    loss_path = os.path.join(out_dir, "losses.png")
    _loss_figure(runs, loss_path)
    written.append(loss_path)

    p_path = os.path.join(out_dir, "schedule.png")
    _curve_figure(runs, "p", "replacement probability", "p", p_path)
    written.append(p_path)
    return written
