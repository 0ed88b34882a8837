"""Layer-wise orthogonal gradient descent."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..taskgen import TaskDataset
from ..tensor_core import ParamStore, backward
from .base import ContinualMethod, as_tensor


@dataclass
class GradientBasis:
    """Orthonormal rows spanning past-task gradients of one parameter tensor.

    ``weights`` holds the magnitude attached to each row; it decides which
    directions survive compression.
    """

    dim: int
    vectors: np.ndarray = None  # (r, dim) float64
    weights: np.ndarray = None  # (r,)
    cap: int = 32
    energy: float = 0.95
    tol: float = 1e-8

    def __post_init__(self):
        if self.vectors is None:
            self.vectors = np.zeros((0, self.dim))
            self.weights = np.zeros(0)
        if self.vectors.shape[1] != self.dim:
            raise ValueError("basis width does not match dim")

    def __len__(self) -> int:
        return len(self.vectors)


def ogd_project(g, basis, alpha: float = 1.0):
    """g - alpha * sum_i <g, b_i> b_i for orthonormal rows b_i of ``basis``."""
    b = basis.vectors if isinstance(basis, GradientBasis) else basis
    is_torch = torch.is_tensor(g)
    gv = g.detach().double().reshape(-1).numpy() if is_torch else np.asarray(g, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1, gv.size) if np.size(b) else np.zeros((0, gv.size))
    if b.shape[1] != gv.size:
        raise ValueError(f"gradient has {gv.size} entries, basis vectors have {b.shape[1]}")
    out = gv - alpha * (b.T @ (b @ gv)) if len(b) else gv.copy()
    if is_torch:
        return torch.from_numpy(out).to(g.dtype).reshape(g.shape)
    return out.reshape(np.shape(g))


def basis_update_and_compress(basis: GradientBasis, grads: np.ndarray) -> GradientBasis:
    """Orthogonalize new gradients against the basis, then truncate by SVD energy.

    Each gradient loses its component inside the current span (two
    Gram-Schmidt passes); residuals below ``basis.tol`` (relative to the
    gradient norm when that exceeds 1) are dropped. If nothing new enters,
    the basis is returned unchanged. Otherwise the weighted basis rows and
    the residuals are stacked and re-factorized, keeping the smallest
    leading set that reaches ``basis.energy`` of the squared singular values,
    at most ``basis.cap`` rows. With an empty basis this is the truncated SVD
    of the gradients themselves.
    """
    grads = np.asarray(grads, dtype=np.float64).reshape(-1, basis.dim)
    old = basis.vectors
    residuals = []
    for g in grads:
        r = g.copy()
        for _ in range(2):  # second pass restores orthogonality lost to rounding
            r -= old.T @ (old @ r)
        if np.linalg.norm(r) < basis.tol * max(1.0, np.linalg.norm(g)):
            continue
        residuals.append(r)
    if not residuals:
        return basis
    stack = np.vstack([basis.weights[:, None] * old, np.asarray(residuals)])
    _, s, vt = np.linalg.svd(stack, full_matrices=False)
    energy = np.cumsum(s ** 2) / np.sum(s ** 2)
    keep = int(np.searchsorted(energy, basis.energy - 1e-12) + 1)
    keep = min(keep, basis.cap, int(np.sum(s > s[0] * 1e-12)))
    return GradientBasis(basis.dim, vt[:keep].copy(), s[:keep].copy(), basis.cap, basis.energy, basis.tol)


class OGD(ContinualMethod):
    name = "ogd"
    defaults = {"lr": 1e-4, "weight_decay": 1e-4, "batch_size": 2, "alpha": 1.0, "cap": 32, "energy": 0.95}

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.bases: dict[str, GradientBasis] = {}

    def adjust_gradients(self, store: ParamStore, k: int) -> None:
        if not self.bases:
            return
        with torch.no_grad():
            for name, p in store.trainable():
                basis = self.bases.get(name)
                if basis is not None and len(basis):
                    p.grad = ogd_project(store.grad(name), basis, self.hp["alpha"])

    def harvest(self, dataset: TaskDataset) -> dict[str, np.ndarray]:
        """Per-batch loss gradients over one ordered pass of the task's data."""
        self.model.requires_grad_(True)
        store = self.model.param_store()
        x, y = as_tensor(dataset.x_train), as_tensor(dataset.y_train)
        bs = self.hp["batch_size"]
        rows = {name: [] for name in store}
        for start in range(0, len(x), bs):
            backward(self.task_loss(x[start: start + bs], y[start: start + bs], 0), store)
            for name in store:
                rows[name].append(store.grad(name).detach().double().reshape(-1).numpy())
        store.zero_grad()
        return {name: np.stack(r) for name, r in rows.items()}

    def end_task(self, k, dataset):
        for name, grads in self.harvest(dataset).items():
            basis = self.bases.get(name)
            if basis is None:
                basis = GradientBasis(grads.shape[1], cap=self.hp["cap"], energy=self.hp["energy"])
            self.bases[name] = basis_update_and_compress(basis, grads)
        super().end_task(k, dataset)

    def state_blocks(self):
        blocks = []
        for name, b in self.bases.items():
            blocks.append((f"basis.{name}", b.vectors.astype("<f8"), {}))
            blocks.append((f"weights.{name}", b.weights.astype("<f8"), {}))
        return blocks

    def load_state(self, meta, arrays):
        super().load_state(meta, arrays)
        self.bases = {}
        for key, v in arrays.items():
            if key.startswith("basis."):
                name = key[len("basis."):]
                self.bases[name] = GradientBasis(v.shape[1], np.array(v), np.array(arrays[f"weights.{name}"]),
                                                 cap=self.hp["cap"], energy=self.hp["energy"])
