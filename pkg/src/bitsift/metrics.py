"""Fixed-column CSV streams for training records, adjustment reports and
sweep tables.

Floats are written with ``repr`` so every table parses back to the exact
values that were written. List-valued cells are ``;``-joined.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

from .precision import AdjustReport

TRAIN_COLUMNS = ("epoch", "phase", "ce", "regularizer", "alpha", "total", "eval_acc",
                 "bits_per_param", "compression_rate", "precisions", "coefficients")
ADJUST_COLUMNS = ("epoch", "layer_id", "n_before", "n_after", "s_before", "s_after",
                  "msb_removed", "lsb_removed", "carried")
SWEEP_COLUMNS = ("alpha", "seed", "bits_per_param", "compression_rate", "acc_before_ft",
                 "acc_after_ft", "precisions", "status")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ";".join(_fmt(v) for v in value)
    return str(value)


class CsvStream:
    """Append rows with a fixed header; the file is flushed after each row."""

    def __init__(self, path, columns: tuple[str, ...]):
        self.path = Path(path)
        self.columns = columns
        self._fh = open(self.path, "w", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(columns)

    def write(self, row: dict) -> None:
        self._writer.writerow([_fmt(row[c]) for c in self.columns])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def train_row(rec) -> dict:
    loss = rec.loss
    return {
        "epoch": rec.epoch,
        "phase": rec.phase,
        "ce": float(loss.ce),
        "regularizer": float(loss.regularizer),
        "alpha": float(loss.alpha),
        "total": float(loss.total),
        "eval_acc": float(rec.eval_acc),
        "bits_per_param": float(rec.bits_per_param),
        "compression_rate": float(rec.compression_rate),
        "precisions": list(rec.precisions),
        "coefficients": [float(c) for c in loss.coefficients],
    }


def adjust_row(epoch: int, rep: AdjustReport) -> dict:
    return {
        "epoch": epoch,
        "layer_id": rep.layer_id,
        "n_before": rep.n_before,
        "n_after": rep.n_after,
        "s_before": float(rep.s_before),
        "s_after": float(rep.s_after),
        "msb_removed": rep.msb_removed,
        "lsb_removed": rep.lsb_removed,
        "carried": bool(rep.carried),
    }


@dataclass
class SweepRow:
    alpha: float
    seed: int
    bits_per_param: float
    compression_rate: float
    acc_before_ft: float
    acc_after_ft: float
    precisions: list[int]
    status: str = "ok"

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def _float(cell: str) -> float:
    return float(cell) if cell else math.nan


def read_sweep(path) -> list[SweepRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SWEEP_COLUMNS:
            raise ValueError(f"{path}: expected columns {SWEEP_COLUMNS}, got {reader.fieldnames}")
        return [
            SweepRow(float(r["alpha"]), int(r["seed"]), _float(r["bits_per_param"]),
                     _float(r["compression_rate"]), _float(r["acc_before_ft"]), _float(r["acc_after_ft"]),
                     [int(p) for p in r["precisions"].split(";") if p], r["status"])
            for r in reader
        ]


def read_train(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != TRAIN_COLUMNS:
            raise ValueError(f"{path}: expected columns {TRAIN_COLUMNS}, got {reader.fieldnames}")
        rows = []
        for r in reader:
            row = {k: float(v) for k, v in r.items() if k not in ("epoch", "phase", "precisions", "coefficients")}
            row["epoch"] = int(r["epoch"])
            row["phase"] = r["phase"]
            row["precisions"] = [int(p) for p in r["precisions"].split(";") if p]
            row["coefficients"] = [float(c) for c in r["coefficients"].split(";") if c]
            rows.append(row)
        return rows
