"""Training loss, relative error, accuracy transform and continual-learning metrics."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class MetricConfig:
    alpha: float = 3.0
    l_max: float = 5.0
    sobolev_weight: float = 1e-3

    def __post_init__(self):
        if self.alpha <= 0 or self.l_max <= 0:
            raise ValueError("alpha and l_max must be positive")
        if self.sobolev_weight < 0:
            raise ValueError("sobolev_weight must be non-negative")


def grid_gradient(f: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Central differences inside, one-sided at the edges, spacing 1/(N-1).

    Returns derivatives along the last two axes (rows, columns).
    """
    return _diff(f, -2), _diff(f, -1)


def _diff(f: torch.Tensor, axis: int) -> torch.Tensor:
    n = f.shape[axis]
    if n < 2:
        return torch.zeros_like(f)
    h = 1.0 / (n - 1)
    first = (f.narrow(axis, 1, 1) - f.narrow(axis, 0, 1)) / h
    last = (f.narrow(axis, n - 1, 1) - f.narrow(axis, n - 2, 1)) / h
    if n == 2:
        return torch.cat([first, last], dim=axis)
    inner = (f.narrow(axis, 2, n - 2) - f.narrow(axis, 0, n - 2)) / (2 * h)
    return torch.cat([first, inner, last], dim=axis)


def sobolev_loss(pred: torch.Tensor, target: torch.Tensor, weight: float) -> torch.Tensor:
    """Batch mean of  |pred - y|^2 + weight * |grad pred - grad y|^2.

    Squared norms are grid averages, so ``weight = 0`` is the mean squared error.
    Inputs are (B, C, H, W) or a single (C, H, W) field.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if pred.dim() == 3:
        pred, target = pred[None], target[None]
    diff = pred - target
    value = diff.pow(2).flatten(1).mean(1)
    if weight:
        gy, gx = grid_gradient(diff)
        value = value + weight * (gy.pow(2) + gx.pow(2)).flatten(1).mean(1)
    return value.mean()


def rel_l2(pred, target) -> float:
    """||pred - y||_2 / ||y||_2 over the vectorized field."""
    p = np.asarray(pred.detach() if torch.is_tensor(pred) else pred, dtype=np.float64).ravel()
    y = np.asarray(target.detach() if torch.is_tensor(target) else target, dtype=np.float64).ravel()
    if p.shape != y.shape:
        raise ValueError("shape mismatch")
    denom = np.linalg.norm(y)
    if denom == 0:
        raise ZeroDivisionError("relative error of a zero-norm target is undefined")
    return float(np.linalg.norm(p - y) / denom)


def mean_rel_l2(preds, targets) -> float:
    """Per-sample relative error averaged over the set."""
    return float(np.mean([rel_l2(p, y) for p, y in zip(preds, targets)]))


def accuracy_r(rel: float, cfg: MetricConfig = MetricConfig()) -> float:
    if rel < 0:
        raise ValueError("relative error must be non-negative")
    return math.exp(-cfg.alpha * rel / cfg.l_max)


class EvalMatrix:
    """Lower-triangular accuracy table: entry (i, j) is task j after stage i (0-based)."""

    def __init__(self, num_tasks: int, task_names: list[str] | None = None):
        if num_tasks < 1:
            raise ValueError("need at least one task")
        self.num_tasks = num_tasks
        self.task_names = list(task_names) if task_names else [str(i) for i in range(num_tasks)]
        self._cells: list[list[float | None]] = [[None] * num_tasks for _ in range(num_tasks)]

    @classmethod
    def from_rows(cls, rows: list[list[float]], task_names: list[str] | None = None) -> "EvalMatrix":
        m = cls(len(rows), task_names)
        for i, row in enumerate(rows):
            for j, v in enumerate(row):
                if v is not None:
                    m[i, j] = v
        return m

    def __setitem__(self, key: tuple[int, int], value: float) -> None:
        i, j = key
        if j > i:
            raise IndexError(f"task {j} is not learned at stage {i}")
        value = float(value)
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"accuracy {value} outside [0, 1]")
        self._cells[i][j] = value

    def __getitem__(self, key: tuple[int, int]) -> float:
        i, j = key
        v = self._cells[i][j]
        if v is None:
            raise KeyError(f"entry ({i}, {j}) is not populated")
        return v

    def get(self, i: int, j: int) -> float | None:
        return self._cells[i][j] if j <= i else None

    def row_complete(self, i: int) -> bool:
        return all(self._cells[i][j] is not None for j in range(i + 1))

    def populated(self) -> int:
        return sum(v is not None for row in self._cells for v in row)

    def stages_completed(self) -> int:
        k = 0
        while k < self.num_tasks and self.row_complete(k):
            k += 1
        return k

    def rows(self) -> list[list[float | None]]:
        return [list(r[: i + 1]) for i, r in enumerate(self._cells)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stage"] + self.task_names)
        for i, row in enumerate(self._cells):
            w.writerow([self.task_names[i]] + ["" if (j > i or v is None) else repr(v) for j, v in enumerate(row)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EvalMatrix":
        rows = list(csv.reader(io.StringIO(text)))
        names = rows[0][1:]
        m = cls(len(names), names)
        for i, row in enumerate(rows[1:]):
            for j, cell in enumerate(row[1:]):
                if cell != "":
                    m[i, j] = float(cell)
        return m

    def __eq__(self, other) -> bool:
        return isinstance(other, EvalMatrix) and self._cells == other._cells and self.task_names == other.task_names


def avg_accuracy(m: EvalMatrix, stage: int) -> float:
    """Mean accuracy over tasks 0..stage after training stage ``stage`` (0-based)."""
    if not m.row_complete(stage):
        raise KeyError(f"stage {stage} row is incomplete")
    return sum(m[stage, j] for j in range(stage + 1)) / (stage + 1)


def forgetting(m: EvalMatrix, stage: int) -> tuple[list[float], float]:
    """Task-wise forgetting of tasks 0..stage-1 at ``stage`` and their mean."""
    if stage < 1:
        raise ValueError("forgetting needs at least one previous task")
    per_task = []
    for j in range(stage):
        best = max(m[k, j] for k in range(j, stage + 1))
        per_task.append(best - m[stage, j])
    return per_task, sum(per_task) / len(per_task)
