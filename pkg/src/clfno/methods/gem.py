"""Averaged gradient episodic memory (single reference gradient)."""

from __future__ import annotations

import warnings

import numpy as np
import torch

from ..tensor_core import ParamStore, backward
from .base import ContinualMethod, as_tensor
from .replay import MemoryMixin


def agem_project(g, g_ref, eps: float = 0.0):
    """Remove the component of ``g`` that opposes ``g_ref`` when their dot product is below ``-eps``."""
    is_torch = torch.is_tensor(g)
    gv = g.detach().double().numpy() if is_torch else np.asarray(g, dtype=np.float64)
    rv = g_ref.detach().double().numpy() if torch.is_tensor(g_ref) else np.asarray(g_ref, dtype=np.float64)
    if gv.shape != rv.shape:
        raise ValueError("gradient and reference gradient differ in shape")
    ref_sq = float(rv.ravel() @ rv.ravel())
    if ref_sq == 0.0:
        warnings.warn("reference gradient is zero; gradient left unprojected", RuntimeWarning, stacklevel=2)
        return g
    dot = float(gv.ravel() @ rv.ravel())
    if dot >= -eps:
        return g
    out = gv - (dot / ref_sq) * rv
    return torch.from_numpy(out).to(g.dtype) if is_torch else out


class AGEM(MemoryMixin, ContinualMethod):
    name = "gem"
    policy = "kmeans"
    defaults = {"lr": 5e-4, "weight_decay": 0.0, "batch_size": 2, "first_budget": 16, "later_budget": 1, "eps": 0.0}

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._init_memory()
        self.projections = 0

    def adjust_gradients(self, store: ParamStore, k: int) -> None:
        if not len(self.memory):
            return
        names = [n for n, _ in store.trainable()]
        g = store.flat_grad(names).clone()
        mx, my, _ = self.memory.arrays()
        backward(self.task_loss(as_tensor(mx), as_tensor(my), k), store)
        g_ref = store.flat_grad(names)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            out = agem_project(g, g_ref, self.hp["eps"])
        if out is not g:
            self.projections += 1
        store.set_flat_grad(out, names)

    def end_task(self, k, dataset):
        self._remember(k, dataset)
        super().end_task(k, dataset)

    def state_blocks(self):
        return self.memory_blocks()

    def state_meta(self):
        return {**super().state_meta(), "memory_seen": self.memory.seen, "memory_capacity": self.memory.capacity}

    def load_state(self, meta, arrays):
        super().load_state(meta, arrays)
        self.load_memory(meta, arrays)
