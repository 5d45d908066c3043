"""Per-round training-dynamics signals and their CSV serialization.

The interesting signals are L1 norms over normalization statistics: how much
the aggregated running statistics moved between rounds (drift), and how far
each client's mini-batch statistics sit from the global ones (deviation).
Statistics are passed around as lists of per-layer ``(mean, var)`` pairs.

The CSV schema is a stable plotting contract:

    round,test_acc,avg_local_loss,stat_drift,local_dev,win_var,lr,frozen,participants

Floats are written with ``repr`` (lossless round-trip), the frozen flag as
0/1, participants as semicolon-joined client ids, and an absent windowed
variance as an empty cell.
"""

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DataError, ShapeError

__all__ = [
    "RoundRecord",
    "CSV_HEADER",
    "l1_drift",
    "local_deviation",
    "windowed_variance",
    "stat_float_count",
    "write_records",
    "read_records",
]

CSV_HEADER = [
    "round",
    "test_acc",
    "avg_local_loss",
    "stat_drift",
    "local_dev",
    "win_var",
    "lr",
    "frozen",
    "participants",
]


@dataclass
class RoundRecord:
    """Diagnostics for one communication round."""

    round: int
    test_acc: float
    avg_local_loss: float
    stat_drift: float
    local_dev: float
    win_var: Optional[float]
    lr: float
    frozen: bool
    participants: list


def _l1_gap(stats_a, stats_b) -> float:
    if len(stats_a) != len(stats_b):
        raise ShapeError(
            f"statistic sets cover {len(stats_a)} vs {len(stats_b)} layers"
        )
    total = 0.0
    for (mean_a, var_a), (mean_b, var_b) in zip(stats_a, stats_b):
        if mean_a.shape != mean_b.shape or var_a.shape != var_b.shape:
            raise ShapeError("statistic sets have incongruent channel counts")
        total += float(np.abs(mean_a - mean_b).sum() + np.abs(var_a - var_b).sum())
    return total


def l1_drift(prev_stats, next_stats) -> float:
    """Sum over layers and channels of |d mean| + |d var|."""
    return _l1_gap(prev_stats, next_stats)


def local_deviation(minibatch_stats, global_stats) -> float:
    """L1 gap between a client's mini-batch statistics and the global ones."""
    return _l1_gap(minibatch_stats, global_stats)


def stat_float_count(stats) -> int:
    """Number of floats in a statistic set; normalizes deviations per entry."""
    return sum(mean.size + var.size for mean, var in stats)


def windowed_variance(history, window: int) -> Optional[float]:
    """Population variance over the trailing ``window`` entries.

    Returns None while the history is shorter than the window.
    """
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    if len(history) < window:
        return None
    tail = np.asarray(history[-window:], dtype=np.float64)
    return float(np.mean((tail - tail.mean()) ** 2))


def _format_float(value) -> str:
    return repr(float(value))


def write_records(records, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for r in records:
            writer.writerow(
                [
                    r.round,
                    _format_float(r.test_acc),
                    _format_float(r.avg_local_loss),
                    _format_float(r.stat_drift),
                    _format_float(r.local_dev),
                    "" if r.win_var is None else _format_float(r.win_var),
                    _format_float(r.lr),
                    int(r.frozen),
                    ";".join(str(int(p)) for p in r.participants),
                ]
            )


def read_records(path):
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise DataError(f"{path}: unexpected metrics header {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(CSV_HEADER):
                raise DataError(f"{path}:{lineno}: expected {len(CSV_HEADER)} cells")
            try:
                records.append(
                    RoundRecord(
                        round=int(row[0]),
                        test_acc=float(row[1]),
                        avg_local_loss=float(row[2]),
                        stat_drift=float(row[3]),
                        local_dev=float(row[4]),
                        win_var=None if row[5] == "" else float(row[5]),
                        lr=float(row[6]),
                        frozen=bool(int(row[7])),
                        participants=[int(p) for p in row[8].split(";") if p != ""],
                    )
                )
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return records
