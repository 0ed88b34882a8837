"""Single-layer extension: one gated task-specific Fourier layer beside a frozen FNO.

The branch reads the lifted field z0 and adds its gated output to the
frozen body's output before the frozen projection. Tasks are identified at
inference by the KPCA router, so no task label is needed.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .. import ood
from ..fno import FNO, FnoConfig, FourierLayer, spectral_layer_count
from ..taskgen import TaskDataset
from ..tensor_core import ParamStore
from .base import ContinualMethod


class SleBranch(nn.Module):
    def __init__(self, channels: int, modes: int, generator: torch.Generator | None = None):
        super().__init__()
        self.layer = FourierLayer(channels, channels, modes, generator)
        self.gate = nn.Parameter(torch.zeros(()))

    def forward(self, z0: torch.Tensor) -> torch.Tensor:
        return self.gate * self.layer(z0)


def branch_parameter_count(config: FnoConfig) -> int:
    """Closed-form size of one branch: a full spectral layer plus the gate."""
    return spectral_layer_count(config.hidden_channels, config.hidden_channels, config.modes) + 1


def sle_forward(model: FNO, branch: SleBranch | None, x: torch.Tensor) -> torch.Tensor:
    model.check_input(x)
    z0 = model.lift(x)
    z = model.body(z0)
    if branch is not None:
        if branch.layer.spectral.shape[2] != z0.shape[1]:
            raise ValueError(f"branch expects {branch.layer.spectral.shape[2]} channels, backbone has {z0.shape[1]}")
        z = z + branch(z0)
    return model.proj(z)


class SLE(ContinualMethod):
    name = "sle"
    defaults = {"lr": 1e-2, "weight_decay": 0.0, "batch_size": 4, "rff_features": 4096,
                "kpca_energy": 0.99, "threshold_margin": 1.5}
    task_agnostic = True

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.branches: dict[int, SleBranch] = {}
        self.router: ood.RouterState | None = None
        self.novelty: dict[int, float] = {}

    def begin_task(self, k: int, dataset: TaskDataset) -> None:
        if k == 0:
            return super().begin_task(k, dataset)
        self.model.requires_grad_(False)
        if self.router is not None:
            routes = ood.route(dataset.x_train, self.router)
            self.novelty[k] = float(np.mean(np.asarray(routes) == ood.NOVEL))
        cfg = self.model.config
        gen = torch.Generator().manual_seed(self.seed * 2003 + k)
        self.branches[k] = SleBranch(cfg.hidden_channels, cfg.modes, gen)

    def store(self) -> ParamStore:
        store = self.model.param_store()
        for k, br in self.branches.items():
            for name, p in br.named_parameters():
                store.add(f"branch.{k}.{name}", p)
        return store

    def predict(self, x, k):
        if k == 0:
            return self.model(x)
        if k not in self.branches:
            raise KeyError(f"no branch for task {k}")
        return sle_forward(self.model, self.branches[k], x)

    def _ensure_router(self, dataset: TaskDataset) -> None:
        if self.router is None:
            x = dataset.x_train
            fmap = ood.RffMap(int(np.prod(x.shape[1:])), ood.median_bandwidth(x), self.hp["rff_features"], self.seed)
            self.router = ood.RouterState(fmap)

    def end_task(self, k, dataset):
        self._ensure_router(dataset)
        self.router.add(ood.fit_detector(dataset.x_train, self.router.fmap, k, energy=self.hp["kpca_energy"],
                                         margin=self.hp["threshold_margin"]))
        if k in self.branches:
            self.branches[k].requires_grad_(False)
        super().end_task(k, dataset)

    @torch.no_grad()
    def infer(self, x, k):
        """Route every sample to the detector with the lowest score, then predict with its branch."""
        if self.router is None:
            return self.predict(x, k), k
        routes = ood.route(x.numpy(), self.router, detect_novel=False)
        outs = [self.predict(x[i: i + 1], t) for i, t in enumerate(routes)]
        return torch.cat(outs), routes[0] if len(set(routes)) == 1 else routes

    def added_parameters(self) -> dict[int, int]:
        return {k: sum(p.numel() for p in br.parameters()) for k, br in self.branches.items()}

    def state_blocks(self):
        blocks = [(f"branch.{k}.{name}", p.detach().numpy().astype("<f4"), {})
                  for k, br in self.branches.items() for name, p in br.named_parameters()]
        if self.router is not None:
            blocks += ood.router_blocks(self.router)[0]
        return blocks

    def state_meta(self):
        meta = {**super().state_meta(), "novelty": {str(k): v for k, v in self.novelty.items()}}
        if self.router is not None:
            meta["router"] = ood.router_blocks(self.router)[1]
        return meta

    def load_state(self, meta, arrays):
        super().load_state(meta, arrays)
        cfg = self.model.config
        self.branches = {}
        for key in arrays:
            if key.startswith("branch.") and key.endswith(".gate"):
                k = int(key.split(".")[1])
                br = SleBranch(cfg.hidden_channels, cfg.modes)
                br.load_state_dict({n: torch.from_numpy(np.array(arrays[f"branch.{k}.{n}"], dtype=np.float32))
                                    for n, _ in br.named_parameters()})
                self.branches[k] = br.requires_grad_(False)
        self.router = ood.router_from_blocks(meta["router"], arrays) if "router" in meta else None
        self.novelty = {int(k): float(v) for k, v in meta.get("novelty", {}).items()}
