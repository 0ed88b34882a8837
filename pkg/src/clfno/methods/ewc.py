"""Elastic weight consolidation with a diagonal empirical Fisher."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from ..metrics import sobolev_loss
from ..taskgen import TaskDataset
from ..tensor_core import ParamStore, backward
from .base import ContinualMethod, as_tensor


@dataclass
class FisherEntry:
    """Importance of each parameter for one finished task, with the anchor values."""

    fisher: dict[str, torch.Tensor]
    anchor: dict[str, torch.Tensor]

    def __post_init__(self):
        for name, f in self.fisher.items():
            if name not in self.anchor or f.shape != self.anchor[name].shape:
                raise ValueError(f"fisher/anchor shape mismatch for {name}")
            if bool((f < 0).any()):
                raise ValueError(f"negative importance for {name}")


def fisher_diagonal(sample_loss: Callable[[int], torch.Tensor], store: ParamStore, n: int) -> dict[str, torch.Tensor]:
    """Mean over ``n`` samples of the squared per-sample loss gradient.

    With a unit-variance Gaussian likelihood the score of a regression
    sample is the gradient of its squared error, so this is the empirical
    Fisher diagonal.
    """
    if n < 1:
        raise ValueError("empty dataset")
    names = [name for name, _ in store.trainable()]
    acc = {name: torch.zeros_like(store[name]) for name in names}
    for i in range(n):
        backward(sample_loss(i), store)
        for name in names:
            acc[name] += store.grad(name).detach() ** 2
    store.zero_grad()
    return {name: a / n for name, a in acc.items()}


def ewc_fisher_diag(model: torch.nn.Module, x: torch.Tensor, y: torch.Tensor, sobolev_weight: float = 0.0) -> FisherEntry:
    store = ParamStore(model.named_parameters())
    fisher = fisher_diagonal(lambda i: sobolev_loss(model(x[i: i + 1]), y[i: i + 1], sobolev_weight), store, len(x))
    return FisherEntry(fisher, {k: v.detach().clone() for k, v in store.items() if k in fisher})


def ewc_penalty(params: dict[str, torch.Tensor] | ParamStore, entries: list[FisherEntry], lam: float) -> torch.Tensor:
    """(lam / 2) * sum over tasks and parameters of F * (theta - theta*)^2."""
    total = None
    for entry in entries:
        for name, f in entry.fisher.items():
            p = params[name]
            if p.shape != f.shape:
                raise ValueError(f"shape mismatch for {name}: {tuple(p.shape)} vs {tuple(f.shape)}")
            term = (f * (p - entry.anchor[name]) ** 2).sum()
            total = term if total is None else total + term
    if total is None:
        return torch.zeros(())
    return 0.5 * lam * total


class EWC(ContinualMethod):
    name = "ewc"
    # Fisher entries of a well-fitted model are tiny (they sum to ~1e-4 at desk
    # scale), hence the large importance weight.
    defaults = {"lr": 5e-3, "weight_decay": 1e-2, "batch_size": 2, "ewc_lambda": 3e7}

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.entries: list[FisherEntry] = []

    def objective(self, xb, yb, k, idx):
        loss = self.task_loss(xb, yb, k)
        if self.entries:
            loss = loss + ewc_penalty(dict(self.model.named_parameters()), self.entries, self.hp["ewc_lambda"])
        return loss

    def end_task(self, k: int, dataset: TaskDataset) -> None:
        self.model.requires_grad_(True)
        self.entries.append(ewc_fisher_diag(self.model, as_tensor(dataset.x_train), as_tensor(dataset.y_train),
                                            self.metric_cfg.sobolev_weight))
        super().end_task(k, dataset)

    def state_blocks(self):
        blocks = []
        for t, e in enumerate(self.entries):
            for name in e.fisher:
                blocks.append((f"fisher.{t}.{name}", e.fisher[name].numpy().astype("<f4"), {}))
                blocks.append((f"anchor.{t}.{name}", e.anchor[name].numpy().astype("<f4"), {}))
        return blocks

    def state_meta(self):
        return {**super().state_meta(), "num_entries": len(self.entries)}

    def load_state(self, meta, arrays):
        super().load_state(meta, arrays)
        self.entries = []
        for t in range(int(meta.get("num_entries", 0))):
            prefix_f, prefix_a = f"fisher.{t}.", f"anchor.{t}."
            fisher = {k[len(prefix_f):]: torch.from_numpy(np.array(v, dtype=np.float32)) for k, v in arrays.items() if k.startswith(prefix_f)}
            anchor = {k[len(prefix_a):]: torch.from_numpy(np.array(v, dtype=np.float32)) for k, v in arrays.items() if k.startswith(prefix_a)}
            self.entries.append(FisherEntry(fisher, anchor))
