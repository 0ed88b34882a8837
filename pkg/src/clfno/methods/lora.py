"""Per-task low-rank additive weight updates on a frozen backbone."""

from __future__ import annotations

import re

import numpy as np
import torch
from torch.func import functional_call

from ..tensor_core import ParamStore
from .base import ContinualMethod

# Pointwise channel maps: lifting, projection and the residual branch of every
# Fourier layer. Spectral weights stay frozen.
ADAPTED = re.compile(r"^(lift\.fc\d|proj\.fc\d|layers\.\d+\.pointwise)\.weight$")


class LoraAdapter:
    """Delta W = (alpha / r) * A @ B for a (k, d) weight; A starts at zero."""

    def __init__(self, k: int, d: int, rank: int, alpha: float, generator: torch.Generator | None = None,
                 init_std: float = 0.02):
        if rank < 1 or rank > min(k, d):
            raise ValueError(f"rank {rank} exceeds matrix dims ({k}, {d})")
        self.rank = rank
        self.alpha = float(alpha)
        self.A = torch.zeros(k, rank, requires_grad=True)
        self.B = (init_std * torch.randn(rank, d, generator=generator)).requires_grad_(True)

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> torch.Tensor:
        return self.scale * (self.A @ self.B)

    def parameters(self) -> list[torch.Tensor]:
        return [self.A, self.B]


def attach_adapters(model: torch.nn.Module, rank: int, alpha: float | None, generator: torch.Generator | None = None
                    ) -> dict[str, LoraAdapter]:
    """One adapter per adapted matrix; the rank is clipped to each matrix's smaller side."""
    adapters = {}
    for name, w in model.named_parameters():
        if ADAPTED.match(name):
            r = min(rank, *w.shape)
            adapters[name] = LoraAdapter(w.shape[0], w.shape[1], r, r if alpha is None else alpha, generator)
    return adapters


def lora_forward(model: torch.nn.Module, adapters: dict[str, LoraAdapter], x: torch.Tensor) -> torch.Tensor:
    params = dict(model.named_parameters())
    adapted = {}
    for name, ad in adapters.items():
        w = params[name]
        if (ad.A.shape[0], ad.B.shape[1]) != tuple(w.shape):
            raise ValueError(f"adapter shape does not match {name}")
        adapted[name] = w + ad.delta()
    return functional_call(model, adapted, (x,))


class LoRA(ContinualMethod):
    name = "lora"
    defaults = {"lr": 1e-3, "weight_decay": 1e-4, "batch_size": 4, "rank": 4, "lora_alpha": None}

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.adapters: dict[int, dict[str, LoraAdapter]] = {}

    def begin_task(self, k, dataset):
        if k == 0:
            return super().begin_task(k, dataset)
        self.model.requires_grad_(False)
        gen = torch.Generator().manual_seed(self.seed * 1009 + k)
        self.adapters[k] = attach_adapters(self.model, self.hp["rank"], self.hp["lora_alpha"], gen)

    def store(self) -> ParamStore:
        store = self.model.param_store()
        for k, ads in self.adapters.items():
            for name, ad in ads.items():
                store.add(f"lora.{k}.{name}.A", ad.A)
                store.add(f"lora.{k}.{name}.B", ad.B)
        return store

    def predict(self, x, k):
        if k == 0:
            return self.model(x)
        if k not in self.adapters:
            raise KeyError(f"no adapters for task {k}")
        self.model.check_input(x)
        return lora_forward(self.model, self.adapters[k], x)

    def end_task(self, k, dataset):
        for ad in self.adapters.get(k, {}).values():
            ad.A.requires_grad_(False)
            ad.B.requires_grad_(False)
        super().end_task(k, dataset)

    def state_blocks(self):
        blocks = []
        for k, ads in self.adapters.items():
            for name, ad in ads.items():
                attrs = {"rank": ad.rank, "alpha": ad.alpha}
                blocks.append((f"lora.{k}.{name}.A", ad.A.detach().numpy().astype("<f4"), attrs))
                blocks.append((f"lora.{k}.{name}.B", ad.B.detach().numpy().astype("<f4"), attrs))
        return blocks

    def load_state(self, meta, arrays):
        super().load_state(meta, arrays)
        self.adapters = {}
        for key, v in arrays.items():
            if not key.endswith(".A"):
                continue
            _, k, name = key[:-2].split(".", 2)
            a = torch.from_numpy(np.array(v, dtype=np.float32))
            b = torch.from_numpy(np.array(arrays[key[:-2] + ".B"], dtype=np.float32))
            ad = LoraAdapter(a.shape[0], b.shape[1], a.shape[1], 1.0)
            ad.A, ad.B = a, b
            ad.alpha = float(meta["alphas"][key[:-2]])
            self.adapters.setdefault(int(k), {})[name] = ad

    def state_meta(self):
        alphas = {f"lora.{k}.{name}": ad.alpha for k, ads in self.adapters.items() for name, ad in ads.items()}
        return {**super().state_meta(), "alphas": alphas}
