"""Per-task multiplicative masks over a frozen backbone."""

from __future__ import annotations

import numpy as np
import torch
from torch.func import functional_call

from ..tensor_core import ParamStore
from .base import ContinualMethod


def masked_names(model: torch.nn.Module) -> list[str]:
    """Weight tensors covered by masks; biases are left unmasked."""
    return [n for n, _ in model.named_parameters() if not n.endswith("bias")]


def new_mask_set(model: torch.nn.Module) -> dict[str, torch.Tensor]:
    params = dict(model.named_parameters())
    return {n: torch.ones_like(params[n]).requires_grad_(True) for n in masked_names(model)}


def effective_params(model: torch.nn.Module, masks: dict[str, torch.Tensor], threshold: float | None = None) -> dict[str, torch.Tensor]:
    params = dict(model.named_parameters())
    out = {}
    for name, m in masks.items():
        if params[name].shape != m.shape:
            raise ValueError(f"mask shape mismatch for {name}")
        if threshold is not None:
            # hard mask in the forward pass, identity gradient to the real-valued mask
            m = m + ((m >= threshold).to(m.dtype) - m).detach()
        out[name] = m * params[name]
    return out


def piggyback_forward(model: torch.nn.Module, masks: dict[str, torch.Tensor] | None, x: torch.Tensor,
                      threshold: float | None = None) -> torch.Tensor:
    if masks is None:
        raise KeyError("no mask set for this task")
    return functional_call(model, effective_params(model, masks, threshold), (x,))


class PiggyBack(ContinualMethod):
    name = "piggyback"
    defaults = {"lr": 1e-2, "weight_decay": 0.0, "batch_size": 2, "binarize": False, "threshold": 0.5}

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.masks: dict[int, dict[str, torch.Tensor]] = {}

    def begin_task(self, k, dataset):
        if k == 0:
            return super().begin_task(k, dataset)
        self.model.requires_grad_(False)
        self.masks[k] = new_mask_set(self.model)

    def store(self) -> ParamStore:
        store = self.model.param_store()
        for k, masks in self.masks.items():
            for name, m in masks.items():
                store.add(f"mask.{k}.{name}", m)
        return store

    def predict(self, x, k):
        if k == 0:
            return self.model(x)
        self.model.check_input(x)
        return piggyback_forward(self.model, self.masks.get(k), x,
                                 self.hp["threshold"] if self.hp["binarize"] else None)

    def end_task(self, k, dataset):
        for m in self.masks.get(k, {}).values():
            m.requires_grad_(False)
        super().end_task(k, dataset)

    def state_blocks(self):
        return [(f"mask.{k}.{name}", m.detach().numpy().astype("<f4"), {})
                for k, masks in self.masks.items() for name, m in masks.items()]

    def load_state(self, meta, arrays):
        super().load_state(meta, arrays)
        self.masks = {}
        for key, v in arrays.items():
            _, k, name = key.split(".", 2)
            self.masks.setdefault(int(k), {})[name] = torch.from_numpy(np.array(v, dtype=np.float32))
