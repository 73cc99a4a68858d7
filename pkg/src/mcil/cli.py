"""Command-line interface: dataset generation, scenario runs, reports.

Exit codes are a stable contract: 0 on success, 1 when a run fails at
runtime (a truncated results.json flagged incomplete is left behind),
and 2 for usage or configuration errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .config import config_echo, load_experiment, make_dataset, make_run_config
from .errors import ConfigError, IngestError, MCILError
from .metrics import MetricsLedger
from .reports import (
    write_comparison_table,
    write_confusion_heatmaps,
    write_forgetting_curves,
)
from .results import read_results, results_dict, write_accuracy_csv, write_results
from .scenario import save_dataset
from .trainer import METHODS, RunRecord, run_scenario


def cmd_gen_data(args) -> int:
    exp = load_experiment(args.config)
    if exp.data_kind != "synthetic":
        raise ConfigError("gen-data requires data.kind: synthetic")
    out = Path(args.out)
    if not out.parent.is_dir():
        raise ConfigError(f"output directory {out.parent} does not exist")
    dataset = make_dataset(exp)
    save_dataset(dataset, out)
    print(f"wrote {len(dataset.samples)} samples over "
          f"{len(dataset.classes)} classes to {out}")
    return 0


def cmd_run(args) -> int:
    exp = load_experiment(args.config)
    if args.method:
        exp = dataclasses.replace(exp, method=args.method)
    try:
        dataset = make_dataset(exp)
    except OSError as exc:
        raise ConfigError(f"cannot read dataset: {exc}") from exc
    if exp.T > len(dataset.classes):
        raise ConfigError(
            f"T={exp.T} exceeds the {len(dataset.classes)} available classes"
        )
    run_cfg = make_run_config(exp, dataset)
    echo = config_echo(exp, run_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def persist(record: RunRecord) -> None:
        doc = results_dict(record, echo)
        write_results(doc, out)
        write_accuracy_csv(doc, out)

    # An empty incomplete document from the start, so even an early crash
    # leaves a truncated record behind.
    persist(RunRecord(config=run_cfg, ledger=MetricsLedger()))
    record = run_scenario(dataset, run_cfg,
                          checkpoint_dir=out / "checkpoints",
                          record_sink=persist)
    doc = results_dict(record, echo)
    print(f"run {doc['run_id']} ({exp.method}): "
          f"acc_avg={doc['acc_avg']:.4f} last_acc={doc['last_acc']:.4f} "
          f"M1={doc['M1']:.4f} M2={doc['M2']:.4f} -> {out / 'results.json'}")
    return 0


def cmd_report(args) -> int:
    docs = [read_results(path) for path in args.results]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table_csv, _ = write_comparison_table(docs, out)
    curves_csv, _ = write_forgetting_curves(docs, out)
    heatmaps = write_confusion_heatmaps(docs, out)
    print(f"wrote {table_csv.name}, {curves_csv.name}, and "
          f"{len(heatmaps)} confusion heatmap(s) to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mcil",
        description="Multimodal class-incremental learning harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="write a synthetic feature file")
    gen.add_argument("--config", required=True, help="experiment YAML")
    gen.add_argument("--out", required=True, help="output feature file")

    run = sub.add_parser("run", help="run the incremental scenario")
    run.add_argument("--config", required=True, help="experiment YAML")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--method", choices=METHODS,
                     help="override the configured method")

    rep = sub.add_parser("report", help="render tables and figures")
    rep.add_argument("--out", required=True, help="output directory")
    rep.add_argument("results", nargs="+", help="results.json file(s)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = {"gen-data": cmd_gen_data, "run": cmd_run,
               "report": cmd_report}[args.command]
    try:
        return handler(args)
    except (ConfigError, IngestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except MCILError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 — the contract is exit 1, not a trace
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
