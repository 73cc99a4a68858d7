"""Report emission from persisted results: tables, curves, heatmaps.

Everything here consumes validated results documents (see results.py)
and writes static artifacts — CSV for exact values, PNG for the eyes.
Rendering is headless; no display is ever required.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

TABLE_COLUMNS = ("method", "run_id", "acc_avg", "last_acc", "M1", "M2")


def _method_of(doc: dict) -> str:
    return doc["config"].get("method", "?")


def _fmt(value) -> str:
    return "" if value is None else repr(value)


def write_comparison_table(docs: list[dict], out_dir) -> tuple[Path, Path]:
    """Per-method composite scores, as exact CSV plus a rendered table."""
    out_dir = Path(out_dir)
    rows = [
        [_method_of(doc), doc["run_id"], _fmt(doc["acc_avg"]),
         _fmt(doc["last_acc"]), _fmt(doc["M1"]), _fmt(doc["M2"])]
        for doc in docs
    ]
    csv_path = out_dir / "comparison_table.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TABLE_COLUMNS)
        writer.writerows(rows)

    display = [
        [row[0], row[1]] + [
            "—" if cell == "" else f"{float(cell):.4f}" for cell in row[2:]
        ]
        for row in rows
    ]
    fig, ax = plt.subplots(figsize=(8, 0.6 + 0.4 * len(rows)))
    ax.axis("off")
    table = ax.table(cellText=display, colLabels=TABLE_COLUMNS,
                     loc="center", cellLoc="center")
    table.scale(1, 1.4)
    png_path = out_dir / "comparison_table.png"
    fig.savefig(png_path, bbox_inches="tight", dpi=150)
    plt.close(fig)
    return csv_path, png_path


def write_forgetting_curves(docs: list[dict], out_dir) -> tuple[Path, Path]:
    """Stage accuracy A_t against the stage index, one line per run."""
    out_dir = Path(out_dir)
    csv_path = out_dir / "forgetting_curves.csv"
    fig, ax = plt.subplots(figsize=(6, 4))
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run_id", "method", "t", "acc"])
        for doc in docs:
            ts = [stage["t"] for stage in doc["per_stage"]]
            accs = [stage["acc"] for stage in doc["per_stage"]]
            for t, acc in zip(ts, accs):
                writer.writerow([doc["run_id"], _method_of(doc), t, repr(acc)])
            ax.plot(ts, accs, marker="o",
                    label=f"{_method_of(doc)} ({doc['run_id']})")
    ax.set_xlabel("incremental stage t")
    ax.set_ylabel("stage accuracy A_t")
    ax.set_ylim(0.0, 1.0)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    png_path = out_dir / "forgetting_curves.png"
    fig.savefig(png_path, bbox_inches="tight", dpi=150)
    plt.close(fig)
    return csv_path, png_path


def write_confusion_heatmaps(docs: list[dict], out_dir) -> list[Path]:
    """One heatmap per stage per run, counts annotated when small."""
    out_dir = Path(out_dir)
    paths = []
    for doc in docs:
        for stage in doc["per_stage"]:
            counts = np.asarray(stage["confusion"], dtype=np.int64)
            fig, ax = plt.subplots(figsize=(4.5, 4))
            image = ax.imshow(counts, cmap="viridis")
            ax.set_xlabel("predicted")
            ax.set_ylabel("true")
            ax.set_title(f"{_method_of(doc)} — stage {stage['t']}")
            fig.colorbar(image, ax=ax, shrink=0.8)
            if counts.shape[0] <= 12:
                for r in range(counts.shape[0]):
                    for c in range(counts.shape[1]):
                        ax.text(c, r, str(counts[r, c]), ha="center",
                                va="center", color="white", fontsize=7)
            path = out_dir / f"confusion_{doc['run_id']}_stage{stage['t']:02d}.png"
            fig.savefig(path, bbox_inches="tight", dpi=150)
            plt.close(fig)
            paths.append(path)
    return paths
