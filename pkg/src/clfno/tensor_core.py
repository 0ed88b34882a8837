"""Numerical substrate: FFTs, named parameter stores, reverse-mode gradients, Adam.

Array arithmetic and the operation tape are PyTorch's: every differentiable
operation on a tensor that requires grad is recorded by autograd, and
:func:`backward` replays that record in reverse. This module adds the
contracts the rest of the package relies on (frozen entries read back zero
gradients, a consumed tape raises, Adam touches trainable entries only) and
the checkpoint format.
"""

from __future__ import annotations

import math
import re
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator

import numpy as np
import torch

from . import container


class TapeError(RuntimeError):
    """The loss cannot be differentiated (not scalar, or tape already consumed)."""


def _check_finite(x: torch.Tensor) -> None:
    if not bool(torch.isfinite(x).all()):
        raise ValueError("non-finite values in FFT input")


def fft2(x: torch.Tensor) -> torch.Tensor:
    """Unnormalized forward 2-D DFT over the last two axes."""
    if x.dim() < 2 or x.shape[-1] < 1 or x.shape[-2] < 1:
        raise ValueError(f"fft2 needs a (..., H, W) array with H, W >= 1, got {tuple(x.shape)}")
    _check_finite(x)
    return torch.fft.fft2(x, norm="backward")


def ifft2(spectrum: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`fft2`; carries the 1/(H*W) factor."""
    if spectrum.dim() < 2:
        raise ValueError("ifft2 needs at least two axes")
    _check_finite(spectrum)
    return torch.fft.ifft2(spectrum, norm="backward")


class ParamStore:
    """Ordered name -> parameter mapping with per-entry trainable flags.

    The trainable flag is the tensor's ``requires_grad``. Gradients are read
    through :meth:`grad`, which reports zeros for frozen entries and for
    trainable entries the last backward pass did not reach.
    """

    def __init__(self, entries: Iterable[tuple[str, torch.Tensor]] = ()):
        self._entries: OrderedDict[str, torch.Tensor] = OrderedDict()
        for name, tensor in entries:
            self.add(name, tensor)

    @classmethod
    def from_modules(cls, **modules: torch.nn.Module) -> "ParamStore":
        store = cls()
        for prefix, module in modules.items():
            for name, p in module.named_parameters():
                store.add(f"{prefix}.{name}" if prefix else name, p)
        return store

    def add(self, name: str, tensor: torch.Tensor) -> None:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        self._entries[name] = tensor

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def trainable(self) -> list[tuple[str, torch.Tensor]]:
        return [(n, p) for n, p in self._entries.items() if p.requires_grad]

    def is_trainable(self, name: str) -> bool:
        return self._entries[name].requires_grad

    def set_trainable(self, selector: str | Callable[[str], bool], flag: bool) -> int:
        """Set the trainable flag on matching entries; returns the match count.

        ``selector`` is a regular expression (``re.search``) or a predicate.
        """
        pred = selector if callable(selector) else re.compile(selector).search
        count = 0
        for name, p in self._entries.items():
            if pred(name):
                p.requires_grad_(flag)
                if not flag:
                    p.grad = None
                count += 1
        return count

    def grad(self, name: str) -> torch.Tensor:
        p = self._entries[name]
        if not p.requires_grad or p.grad is None:
            return torch.zeros_like(p)
        return p.grad

    def zero_grad(self) -> None:
        for p in self._entries.values():
            p.grad = None

    def numel(self, trainable_only: bool = False) -> int:
        return sum(p.numel() for p in self._entries.values() if p.requires_grad or not trainable_only)

    def snapshot(self) -> dict[str, torch.Tensor]:
        return {n: p.detach().clone() for n, p in self._entries.items()}

    @torch.no_grad()
    def load(self, values: dict[str, torch.Tensor | np.ndarray]) -> None:
        for name, value in values.items():
            target = self._entries[name]
            src = torch.as_tensor(np.asarray(value) if not torch.is_tensor(value) else value)
            if tuple(src.shape) != tuple(target.shape):
                raise ValueError(f"shape mismatch for {name}: {tuple(src.shape)} vs {tuple(target.shape)}")
            target.copy_(src.to(target.dtype))

    def flat_grad(self, names: list[str] | None = None) -> torch.Tensor:
        names = names or [n for n, _ in self.trainable()]
        return torch.cat([self.grad(n).reshape(-1) for n in names])

    @torch.no_grad()
    def set_flat_grad(self, flat: torch.Tensor, names: list[str] | None = None) -> None:
        names = names or [n for n, _ in self.trainable()]
        offset = 0
        for n in names:
            p = self._entries[n]
            k = p.numel()
            p.grad = flat[offset: offset + k].reshape(p.shape).clone()
            offset += k


def backward(loss: torch.Tensor, store: ParamStore) -> None:
    """Reverse-mode pass from a scalar loss into the store's gradient slots.

    Trainable entries get d(loss)/d(entry); frozen entries hold no gradient
    (read back as zero through :meth:`ParamStore.grad`).
    """
    if loss.numel() != 1:
        raise TapeError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    loss = loss.reshape(())
    names = [n for n, _ in store.trainable()]
    tensors = [store[n] for n in names]
    for name, p in store.items():
        p.grad = None
    if not tensors:
        return
    if not loss.requires_grad:
        for p in tensors:
            p.grad = torch.zeros_like(p)
        return
    try:
        grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    except RuntimeError as exc:
        raise TapeError(f"cannot differentiate loss: {exc}") from exc
    for p, g in zip(tensors, grads):
        p.grad = torch.zeros_like(p) if g is None else g


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)


@torch.no_grad()
def adam_step(state: AdamState, store: ParamStore, lr: float | None = None) -> None:
    """Bias-corrected Adam update of the trainable entries.

    Weight decay is the classic L2 form (added to the gradient before the
    moment updates). The step counter advances even if no entry is trainable.
    """
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in store.trainable():
        g = store.grad(name)
        if state.weight_decay:
            g = g + state.weight_decay * p
        m = state.exp_avg.get(name)
        if m is None:
            m = state.exp_avg[name] = torch.zeros_like(p)
            state.exp_avg_sq[name] = torch.zeros_like(p)
        v = state.exp_avg_sq[name]
        m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        denom = (v / bc2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-lr / bc1)


def cosine_lr(step: int, total_steps: int, start_lr: float, final_lr: float = 1e-5) -> float:
    """Cosine decay from ``start_lr`` to ``final_lr`` over ``total_steps`` steps."""
    if start_lr <= final_lr or total_steps <= 1:
        return start_lr
    frac = min(max(step / (total_steps - 1), 0.0), 1.0)
    return final_lr + 0.5 * (start_lr - final_lr) * (1.0 + math.cos(math.pi * frac))


def seeded_generator(*keys: int) -> torch.Generator:
    """Torch generator whose seed is a stable function of integer keys."""
    seed = np.random.SeedSequence([int(k) for k in keys]).generate_state(1, dtype=np.uint64)[0]
    return torch.Generator().manual_seed(int(seed) & 0x7FFF_FFFF_FFFF_FFFF)


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path: str | Path, store: ParamStore, meta: dict | None = None) -> None:
    """Write every entry as little-endian float32 together with its trainable flag."""
    blocks = []
    for name, p in store.items():
        arr = p.detach().cpu().numpy().astype("<f4")
        blocks.append((name, arr, {"trainable": bool(p.requires_grad)}))
    container.write(path, "checkpoint", blocks, meta)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, bool], dict]:
    """Return ``(values, trainable_flags, meta)`` from a checkpoint file."""
    header, arrays = container.read(path, "checkpoint")
    flags = {b["name"]: bool(b["attrs"].get("trainable", True)) for b in header["blocks"]}
    return arrays, flags, header["meta"]
