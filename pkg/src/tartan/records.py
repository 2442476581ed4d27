"""RunRecord export and import.

CSV: one row per logged step with columns
``step, alpha_<task>..., loss_<task>..., val_metric`` (tasks in end-first
order; val_metric blank on steps without a validation pass). JSON carries the
full record including the config snapshot. Floats are written with repr so
exports are byte-identical across runs.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict
from typing import Dict, List

from .strategies import LoggedStep, RunRecord

RECORD_SCHEMA_VERSION = 1


def _fmt(value: float) -> str:
    return repr(float(value))


def run_record_to_csv(record: RunRecord, path) -> None:
    steps = [row.step for row in record.steps]
    if any(b <= a for a, b in zip(steps, steps[1:])):
        raise ValueError("step indices must be strictly increasing")
    for row in record.steps:
        total = sum(row.alpha.values())
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"alpha row at step {row.step} sums to {total!r}")
    header = ["step"]
    header += [f"alpha_{tid}" for tid in record.task_ids]
    header += [f"loss_{tid}" for tid in record.task_ids]
    header += ["val_metric"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in record.steps:
            out = [str(row.step)]
            out += [_fmt(row.alpha[tid]) if tid in row.alpha else "" for tid in record.task_ids]
            out += [_fmt(row.losses[tid]) if tid in row.losses else "" for tid in record.task_ids]
            out += ["" if row.val_accuracy is None else _fmt(row.val_accuracy)]
            writer.writerow(out)


def run_record_to_json(record: RunRecord, path) -> None:
    doc = {
        "schema_version": RECORD_SCHEMA_VERSION,
        "strategy": record.strategy,
        "task_ids": record.task_ids,
        "seed": record.seed,
        "stop_reason": record.stop_reason,
        "best_val_step": record.best_val_step,
        "final_val_metric": record.final_val_metric,
        "final_test_metric": record.final_test_metric,
        "config": record.config,
        "steps": [asdict(row) for row in record.steps],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def run_record_from_json(path) -> RunRecord:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != RECORD_SCHEMA_VERSION:
        raise ValueError(f"unsupported record schema version {doc.get('schema_version')}")
    steps = [LoggedStep(**row) for row in doc["steps"]]
    return RunRecord(
        strategy=doc["strategy"],
        task_ids=list(doc["task_ids"]),
        steps=steps,
        final_val_metric=doc["final_val_metric"],
        final_test_metric=doc["final_test_metric"],
        stop_reason=doc["stop_reason"],
        best_val_step=doc["best_val_step"],
        seed=doc["seed"],
        config=doc["config"],
    )


def read_csv_columns(path) -> Dict[str, List[str]]:
    """Raw string columns of a record CSV, keyed by header name."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        columns: Dict[str, List[str]] = {name: [] for name in header}
        for row in reader:
            for name, value in zip(header, row):
                columns[name].append(value)
    return columns
