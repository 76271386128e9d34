"""Intra/inter-domain accuracy, forgetting gaps and text/CSV outputs."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ParameterError
from .models import ClientModel, Snapshot, predict
from .numerics import Matrix

PHASES = ("pretrain", "post-collab", "post-local")
CSV_COLUMNS = (
    "epoch",
    "phase",
    "intra_avg",
    "inter_avg",
    "intra_last3",
    "inter_last3",
    "intra_clients",
    "inter_clients",
    "collab_loss",
    "local_loss",
)
SUMMARY_WINDOW = 3


def intra_accuracy(model: ClientModel | Snapshot, test_x: Matrix, test_y: np.ndarray) -> float:
    if len(test_y) == 0:
        raise ParameterError("empty test set")
    return float(np.mean(predict(model, test_x) == np.asarray(test_y)))


def inter_accuracy(model: ClientModel | Snapshot, tests: Sequence[tuple[Matrix, np.ndarray]], own_domain: int) -> float:
    """Equal-weight mean accuracy over every domain except ``own_domain``."""
    if len(tests) < 2:
        raise ParameterError("inter-domain accuracy needs at least 2 domains")
    others = [intra_accuracy(model, x, y) for j, (x, y) in enumerate(tests) if j != own_domain]
    return float(sum(others) / len(others))


@dataclass(frozen=True)
class MetricsRecord:
    epoch: int
    phase: str
    intra: tuple[float, ...]
    inter: tuple[float, ...]
    collab_loss: float = math.nan
    local_loss: float = math.nan

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ParameterError(f"unknown phase {self.phase!r}")
        for acc in (*self.intra, *self.inter):
            if not 0.0 <= acc <= 1.0:
                raise ParameterError(f"accuracy {acc} outside [0, 1]")

    @property
    def intra_avg(self) -> float:
        return float(np.mean(self.intra))

    @property
    def inter_avg(self) -> float:
        return float(np.mean(self.inter))


def evaluate_clients(models: Sequence[ClientModel], tests: Sequence[tuple[Matrix, np.ndarray]]) -> tuple[tuple[float, ...], tuple[float, ...]]:
    intra = tuple(intra_accuracy(m, *tests[i]) for i, m in enumerate(models))
    inter = tuple(inter_accuracy(m, tests, i) for i, m in enumerate(models))
    return intra, inter


def rolling_last(log: Sequence[MetricsRecord], window: int = SUMMARY_WINDOW) -> dict[int, tuple[float, float]]:
    """For each post-local record (epoch >= 1), the mean intra/inter over the last ``window`` epochs."""
    out = {}
    seen: list[MetricsRecord] = []
    for rec in log:
        if rec.phase == "post-local" and rec.epoch >= 1:
            seen.append(rec)
            tail = seen[-window:]
            out[id(rec)] = (float(np.mean([r.intra_avg for r in tail])), float(np.mean([r.inter_avg for r in tail])))
    return out


def summarize(log: Sequence[MetricsRecord], window: int = SUMMARY_WINDOW) -> dict[str, float]:
    """Mean of the last ``window`` communication epochs; falls back to the pretrain record."""
    finals = [r for r in log if r.phase == "post-local" and r.epoch >= 1][-window:]
    if not finals:
        finals = [r for r in log if r.phase == "pretrain"]
    if not finals:
        return {"intra": math.nan, "inter": math.nan}
    return {"intra": float(np.mean([r.intra_avg for r in finals])), "inter": float(np.mean([r.inter_avg for r in finals]))}


def forgetting_gaps(log: Sequence[MetricsRecord]) -> dict[int, float]:
    """Per epoch: inter accuracy after collaboration minus inter accuracy after the local phase."""
    collab = {r.epoch: r.inter_avg for r in log if r.phase == "post-collab"}
    return {r.epoch: collab[r.epoch] - r.inter_avg for r in log if r.phase == "post-local" and r.epoch in collab}


def _fmt_loss(x: float) -> str:
    return "" if math.isnan(x) else f"{x:.6f}"


def metrics_csv_text(log: Sequence[MetricsRecord]) -> str:
    rolling = rolling_last(log)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for rec in log:
        last = rolling.get(id(rec))
        w.writerow(
            [
                rec.epoch,
                rec.phase,
                f"{rec.intra_avg:.4f}",
                f"{rec.inter_avg:.4f}",
                "" if last is None else f"{last[0]:.4f}",
                "" if last is None else f"{last[1]:.4f}",
                ";".join(f"{a:.4f}" for a in rec.intra),
                ";".join(f"{a:.4f}" for a in rec.inter),
                _fmt_loss(rec.collab_loss),
                _fmt_loss(rec.local_loss),
            ]
        )
    return buf.getvalue()


def write_metrics_csv(log: Sequence[MetricsRecord], path: str | Path) -> None:
    Path(path).write_text(metrics_csv_text(log))


def read_metrics_csv(path: str | Path) -> list[dict]:
    """Parse a metrics CSV back into typed rows (accuracies as floats)."""
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            parsed = {"epoch": int(row["epoch"]), "phase": row["phase"]}
            for key in ("intra_avg", "inter_avg", "intra_last3", "inter_last3", "collab_loss", "local_loss"):
                parsed[key] = float(row[key]) if row[key] else math.nan
            for key in ("intra_clients", "inter_clients"):
                parsed[key] = tuple(float(v) for v in row[key].split(";")) if row[key] else ()
            rows.append(parsed)
    return rows


def dump_correlation_matrix(m, path: str | Path) -> None:
    """C lines of C space-separated values, fixed 6-decimal formatting."""
    mat = np.asarray(getattr(m, "m", m), dtype=np.float64)
    lines = [" ".join(f"{v:+.6f}" for v in row) for row in mat]
    Path(path).write_text("\n".join(lines) + "\n")


def load_correlation_matrix(path: str | Path) -> Matrix:
    return np.array([[float(v) for v in line.split()] for line in Path(path).read_text().splitlines() if line.strip()])
