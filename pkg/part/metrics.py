""" Training metrics log and evaluation scores. """
import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Union

import numpy as np

from .definitions import METRICS_HEADER
from .errors import MetricError

_FilePath = Union[str, Path]


@dataclass(frozen=True)
class MetricsRecord:
    """One row of the metrics log; antisymmetry is only measured periodically."""

    step: int
    loss: float
    learning_rate: float
    antisymmetry: Optional[float]
    wall_time: float

    def row(self) -> List[str]:
        antisymmetry = "" if self.antisymmetry is None else repr(self.antisymmetry)
        return [
            str(self.step),
            repr(self.loss),
            repr(self.learning_rate),
            antisymmetry,
            f"{self.wall_time:.3f}",
        ]


class MetricsLog:
    """Append-only training log with strictly increasing step indices.

    When a path is given, every appended record is written through to a CSV file
      with the header `step,loss,learning_rate,antisymmetry,wall_time`. Opening an
      existing file (resume) continues it.
    """

    def __init__(self, path: Optional[_FilePath] = None):
        self.path = None if path is None else Path(path)
        self.records: List[MetricsRecord] = []
        if self.path is not None and self.path.exists():
            self.records = read_metrics(self.path)
        elif self.path is not None:
            with self.path.open("w", newline="") as f:
                csv.writer(f).writerow(METRICS_HEADER)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[MetricsRecord]:
        return iter(self.records)

    @property
    def last_step(self) -> Optional[int]:
        return self.records[-1].step if self.records else None

    def append(self, record: MetricsRecord) -> None:
        """Add a record.

        Raises:
            MetricError: If the step does not follow the last logged step.
        """
        if self.records and record.step <= self.records[-1].step:
            raise MetricError(
                f"Metrics steps must increase. Step {record.step} follows "
                f"{self.records[-1].step}"
            )
        self.records.append(record)
        if self.path is not None:
            with self.path.open("a", newline="") as f:
                csv.writer(f).writerow(record.row())

    def truncate(self, step: int) -> None:
        """Drop every record after `step` (resuming from an earlier checkpoint)."""
        self.records = [record for record in self.records if record.step <= step]
        if self.path is not None:
            with self.path.open("w", newline="") as f:
                writer = csv.writer(f)
                writer.writerow(METRICS_HEADER)
                writer.writerows(record.row() for record in self.records)


def read_metrics(path: _FilePath) -> List[MetricsRecord]:
    """Read a metrics CSV.

    Raises:
        MetricError: If the header does not match.
    """
    with Path(path).open(newline="") as f:
        reader = csv.reader(f)
        header = tuple(next(reader, ()))
        if header != METRICS_HEADER:
            raise MetricError(f"Expected metrics header {METRICS_HEADER}. Found: {header}")
        return [
            MetricsRecord(
                step=int(row[0]),
                loss=float(row[1]),
                learning_rate=float(row[2]),
                antisymmetry=float(row[3]) if row[3] else None,
                wall_time=float(row[4]),
            )
            for row in reader
            if row
        ]


def coordinate_mse(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Mean squared error per target coordinate over all leading axes."""
    if pred.shape != truth.shape:
        raise MetricError(f"Prediction {pred.shape} and truth {truth.shape} differ")
    residual = (pred - truth).reshape(-1, pred.shape[-1])
    return (residual**2).mean(axis=0)


def l2_error(pred: np.ndarray, truth: np.ndarray, columns: int = 2) -> float:
    """Mean Euclidean distance between the first `columns` coordinates of each pair."""
    if pred.shape != truth.shape:
        raise MetricError(f"Prediction {pred.shape} and truth {truth.shape} differ")
    residual = (pred - truth).reshape(-1, pred.shape[-1])[:, :columns]
    return float(np.linalg.norm(residual, axis=1).mean())


def accuracy(predicted: np.ndarray, labels: np.ndarray) -> float:
    if predicted.shape != labels.shape or not labels.size:
        raise MetricError("Accuracy needs matching, non-empty predictions and labels")
    return float((predicted == labels).mean())


def cohen_kappa(predicted: np.ndarray, labels: np.ndarray, num_classes: int) -> float:
    """Agreement beyond chance: (p_o - p_e) / (1 - p_e).

    Returns 0.0 when chance agreement is already perfect (a single class on both
      sides), where the ratio is undefined.
    """
    if predicted.shape != labels.shape or not labels.size:
        raise MetricError("Kappa needs matching, non-empty predictions and labels")
    confusion = np.zeros((num_classes, num_classes))
    np.add.at(confusion, (labels, predicted), 1.0)
    total = confusion.sum()
    observed = np.trace(confusion) / total
    expected = float((confusion.sum(axis=0) * confusion.sum(axis=1)).sum() / total**2)
    if expected >= 1.0:
        return 0.0
    return float((observed - expected) / (1.0 - expected))


def summarize(values: Dict[str, float]) -> str:
    """One log line of `name=value` pairs."""
    return " ".join(f"{name}={value:.6g}" for name, value in values.items())
