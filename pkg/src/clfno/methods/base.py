"""Trainer interface shared by all continual-learning strategies."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..fno import FNO
from ..metrics import MetricConfig, sobolev_loss
from ..taskgen import TaskDataset
from ..tensor_core import AdamState, ParamStore, adam_step, backward, cosine_lr


@dataclass
class StageSettings:
    epochs: int
    lr: float
    weight_decay: float
    batch_size: int
    final_lr: float = 1e-5


def as_tensor(a) -> torch.Tensor:
    return a if torch.is_tensor(a) else torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32))


class ContinualMethod:
    """Base strategy: naive sequential fine-tuning of the whole model.

    Subclasses override the hooks below. Stage 0 (the first task) is always
    plain training of the backbone; ``end_task(0, ...)`` then lets the
    strategy record whatever it needs about the first task.
    """

    name = "naive"
    defaults: dict = {"lr": 1e-3, "weight_decay": 0.0, "batch_size": 1}
    task_agnostic = False

    def __init__(self, model: FNO, hparams: dict | None = None, metric_cfg: MetricConfig = MetricConfig(), seed: int = 0):
        unknown = set(hparams or {}) - set(self.defaults)
        if unknown:
            raise ValueError(f"unknown hyperparameters for {self.name}: {sorted(unknown)}")
        self.model = model
        self.hp = {**self.defaults, **(hparams or {})}
        self.metric_cfg = metric_cfg
        self.seed = seed
        self.num_tasks_seen = 0

    # -- hooks ---------------------------------------------------------------
    def settings(self, epochs: int) -> StageSettings:
        return StageSettings(epochs, self.hp["lr"], self.hp["weight_decay"], self.hp["batch_size"])

    def begin_task(self, k: int, dataset: TaskDataset) -> None:
        self.model.requires_grad_(True)

    def store(self) -> ParamStore:
        """Every parameter the strategy owns; trainable flags select what trains."""
        return self.model.param_store()

    def predict(self, x: torch.Tensor, k: int) -> torch.Tensor:
        return self.model(x)

    def training_set(self, k: int, dataset: TaskDataset) -> tuple[torch.Tensor, torch.Tensor]:
        return as_tensor(dataset.x_train), as_tensor(dataset.y_train)

    def task_loss(self, xb: torch.Tensor, yb: torch.Tensor, k: int) -> torch.Tensor:
        return sobolev_loss(self.predict(xb, k), yb, self.metric_cfg.sobolev_weight)

    def objective(self, xb: torch.Tensor, yb: torch.Tensor, k: int, idx: torch.Tensor) -> torch.Tensor:
        return self.task_loss(xb, yb, k)

    def adjust_gradients(self, store: ParamStore, k: int) -> None:
        pass

    def end_task(self, k: int, dataset: TaskDataset) -> None:
        self.model.requires_grad_(False)
        self.num_tasks_seen = k + 1

    # -- inference -----------------------------------------------------------
    @torch.no_grad()
    def infer(self, x: torch.Tensor, k: int) -> tuple[torch.Tensor, int]:
        """Prediction used at evaluation and the task index it was made with."""
        return self.predict(x, k), k

    # -- persistence ---------------------------------------------------------
    def state_blocks(self) -> list[tuple[str, np.ndarray, dict]]:
        return []

    def state_meta(self) -> dict:
        return {"num_tasks_seen": self.num_tasks_seen}

    def load_state(self, meta: dict, arrays: dict[str, np.ndarray]) -> None:
        self.num_tasks_seen = int(meta.get("num_tasks_seen", 0))


def fit(method: ContinualMethod, k: int, dataset: TaskDataset, settings: StageSettings,
        generator: torch.Generator) -> list[float]:
    """Run ``settings.epochs`` epochs of Adam on the strategy's objective.

    Returns the mean objective per epoch.
    """
    x_all, y_all = method.training_set(k, dataset)
    n = len(x_all)
    if n == 0:
        raise ValueError("empty training set")
    store = method.store()
    state = AdamState(lr=settings.lr, weight_decay=settings.weight_decay)
    bs = max(1, min(settings.batch_size, n))
    steps_per_epoch = (n + bs - 1) // bs
    total = settings.epochs * steps_per_epoch
    history = []
    step = 0
    for _ in range(settings.epochs):
        perm = torch.randperm(n, generator=generator)
        running = 0.0
        for start in range(0, n, bs):
            idx = perm[start: start + bs]
            loss = method.objective(x_all[idx], y_all[idx], k, idx)
            backward(loss, store)
            method.adjust_gradients(store, k)
            adam_step(state, store, cosine_lr(step, total, settings.lr, settings.final_lr))
            running += float(loss.detach())
            step += 1
        history.append(running / steps_per_epoch)
    store.zero_grad()
    return history
