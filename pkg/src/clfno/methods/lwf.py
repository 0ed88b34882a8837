"""Learning without forgetting: distillation from the previous-stage model."""

from __future__ import annotations

import copy

import torch

from ..metrics import sobolev_loss
from ..taskgen import TaskDataset
from .base import ContinualMethod


def distillation_term(student_out: torch.Tensor, teacher_out: torch.Tensor) -> torch.Tensor:
    """Batch mean of the grid-averaged squared difference to the teacher."""
    if student_out.shape != teacher_out.shape:
        raise ValueError("student and teacher outputs differ in shape")
    return (student_out - teacher_out).pow(2).flatten(1).mean(1).mean()


def lwf_loss(student_out: torch.Tensor, teacher_out: torch.Tensor, target: torch.Tensor, lam: float,
             sobolev_weight: float = 0.0) -> torch.Tensor:
    loss = sobolev_loss(student_out, target, sobolev_weight)
    if lam:
        loss = loss + lam * distillation_term(student_out, teacher_out.detach())
    return loss


class LwF(ContinualMethod):
    name = "lwf"
    defaults = {"lr": 1e-3, "weight_decay": 1e-2, "batch_size": 2, "lwf_lambda": 0.3}

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.teacher_out: torch.Tensor | None = None

    def begin_task(self, k: int, dataset: TaskDataset) -> None:
        super().begin_task(k, dataset)
        self.teacher_out = None
        if k > 0:
            # The teacher is frozen for the whole stage, so its outputs on the
            # stage's inputs are computed once.
            x, _ = self.training_set(k, dataset)
            teacher = copy.deepcopy(self.model).requires_grad_(False)
            with torch.no_grad():
                self.teacher_out = torch.cat([teacher(x[i: i + 1]) for i in range(len(x))])

    def objective(self, xb, yb, k, idx):
        if self.teacher_out is None:
            return self.task_loss(xb, yb, k)
        return lwf_loss(self.predict(xb, k), self.teacher_out[idx], yb, self.hp["lwf_lambda"],
                        self.metric_cfg.sobolev_weight)

    def end_task(self, k, dataset):
        self.teacher_out = None
        super().end_task(k, dataset)
