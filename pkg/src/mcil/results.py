"""Persisted run results: the results.json document and the accuracy CSV.

The document is self-describing — it embeds the resolved config echo
(with tool version and seed), the zero-shot baseline, the full accuracy
matrix, per-stage metrics including confusion counts, and the composite
scores — so every report can be rebuilt from it alone. Composite scores
are null while a run is still in flight; `incomplete` flips to false
only when the final stage and the fusion NMIs are in.
"""

from __future__ import annotations

import csv
import datetime
import json
from pathlib import Path

from .config import run_id
from .errors import ConfigError, ProtocolError
from .metrics import avg_accuracy, metric_m1, metric_m2
from .trainer import RunRecord

RESULT_KEYS = (
    "run_id", "timestamp", "config", "zero_shot", "R", "per_stage",
    "NMI_f_v", "NMI_f_a", "acc_avg", "last_acc", "M1", "M2", "incomplete",
)

STAGE_KEYS = ("t", "acc", "For", "w", "BWT", "FWT", "confusion")


def results_dict(record: RunRecord, echo: dict) -> dict:
    """Render a run record (possibly mid-flight) into the results schema."""
    ledger = record.ledger
    matrix = ledger.matrix
    done = ledger.T
    per_stage = [
        {
            "t": s.t,
            "acc": s.acc,
            "For": s.For,
            "w": s.w,
            "BWT": s.BWT,
            "FWT": s.FWT,
            "confusion": s.confusion.tolist(),
        }
        for s in ledger.stages
    ]
    complete = not record.incomplete
    zero_shot = []
    for t in range(1, record.config.T + 1):
        try:
            zero_shot.append(matrix.zero_shot(t))
        except ProtocolError:
            break  # run crashed before the baseline sweep finished
    return {
        "run_id": run_id(echo),
        "timestamp": datetime.datetime.now(datetime.timezone.utc)
                     .isoformat(timespec="seconds"),
        "config": echo,
        "zero_shot": zero_shot,
        "R": matrix.to_rows(),
        "per_stage": per_stage,
        "NMI_f_v": ledger.nmi_f_v,
        "NMI_f_a": ledger.nmi_f_a,
        "acc_avg": avg_accuracy(matrix) if done else None,
        "last_acc": matrix.stage_accuracy(done) if done else None,
        "M1": metric_m1(ledger) if complete else None,
        "M2": metric_m2(ledger) if complete else None,
        "incomplete": record.incomplete,
    }


def write_results(doc: dict, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "results.json"
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def write_accuracy_csv(doc: dict, out_dir) -> Path:
    """Long-form accuracy matrix: one (t, i, accuracy) row per cell."""
    path = Path(out_dir) / "accuracy_matrix.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "i", "accuracy"])
        for t, row in enumerate(doc["R"], start=1):
            for i, acc in enumerate(row, start=1):
                writer.writerow([t, i, repr(acc)])
    return path


def read_results(path) -> dict:
    """Load and structurally validate one results document."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read results {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path} must hold a JSON object")
    missing = [k for k in RESULT_KEYS if k not in doc]
    if missing:
        raise ConfigError(f"{path} is missing key(s): {', '.join(missing)}")
    if not isinstance(doc["per_stage"], list):
        raise ConfigError(f"{path}: per_stage must be a list")
    for entry in doc["per_stage"]:
        gone = [k for k in STAGE_KEYS if k not in entry]
        if gone:
            raise ConfigError(
                f"{path}: per_stage entry missing key(s): {', '.join(gone)}"
            )
    rows = doc["R"]
    if not isinstance(rows, list) or any(
        not isinstance(row, list) or len(row) != t
        for t, row in enumerate(rows, start=1)
    ):
        raise ConfigError(f"{path}: R must be lower-triangular")
    return doc
