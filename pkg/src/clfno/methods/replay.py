"""Experience replay with reservoir or k-means sample selection."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from ..taskgen import TaskDataset
from .base import ContinualMethod, as_tensor


@dataclass
class ReplayBuffer:
    """Fixed-capacity store of (input, target, task) triples plus a stream counter."""

    capacity: int
    items: list[tuple[np.ndarray, np.ndarray, int]] = field(default_factory=list)
    seen: int = 0

    def __post_init__(self):
        if self.capacity < 0:
            raise ValueError("capacity must be non-negative")

    def __len__(self) -> int:
        return len(self.items)

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if not self.items:
            return np.zeros((0,)), np.zeros((0,)), np.zeros((0,), dtype=np.int64)
        return (np.stack([it[0] for it in self.items]), np.stack([it[1] for it in self.items]),
                np.array([it[2] for it in self.items], dtype=np.int64))


def keep_probability(capacity: int, t: int) -> float:
    if t < 1:
        raise ValueError("stream position starts at 1")
    return min(1.0, capacity / t)


def reservoir_update(buffer: ReplayBuffer, sample, t: int, rng: np.random.Generator) -> ReplayBuffer:
    """Offer the ``t``-th stream item (1-based) to the buffer."""
    p = keep_probability(buffer.capacity, t)
    buffer.seen = t
    if buffer.capacity == 0:
        return buffer
    if len(buffer.items) < buffer.capacity:
        buffer.items.append(sample)
    elif rng.random() < p:
        buffer.items[int(rng.integers(buffer.capacity))] = sample
    return buffer


def reservoir_select(n: int, capacity: int, rng: np.random.Generator) -> list[int]:
    """Indices a reservoir of ``capacity`` retains from a stream of ``n`` items."""
    buf = ReplayBuffer(capacity)
    for t in range(1, n + 1):
        reservoir_update(buf, t - 1, t, rng)
    return sorted(buf.items)


def kmeans_select(inputs: np.ndarray, k: int, seed: int = 0, max_iter: int = 100) -> list[int]:
    """Index of the sample nearest to each k-means centroid, deduplicated and sorted."""
    from sklearn.cluster import KMeans

    x = np.asarray(inputs, dtype=np.float64).reshape(len(inputs), -1)
    n = len(x)
    if k < 1 or k > n:
        raise ValueError(f"cannot select {k} of {n} samples")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        km = KMeans(n_clusters=k, n_init=4, max_iter=max_iter, random_state=seed).fit(x)
    d = ((x[None, :, :] - km.cluster_centers_[:, None, :]) ** 2).sum(-1)
    return sorted(set(int(i) for i in d.argmin(1)))


def select_memory(policy: str, inputs: np.ndarray, budget: int, seed: int) -> list[int]:
    budget = min(budget, len(inputs))
    if budget == 0:
        return []
    if policy == "reservoir":
        return reservoir_select(len(inputs), budget, np.random.default_rng(seed))
    if policy == "kmeans":
        return kmeans_select(inputs, budget, seed)
    raise ValueError(f"unknown selection policy {policy!r}")


class MemoryMixin:
    """Per-task episodic memory filled at the end of every stage.

    Each finished task grows the capacity by its budget and contributes at
    most that many samples, so the buffer never exceeds its capacity.
    """

    policy = "kmeans"

    def _init_memory(self):
        self.memory = ReplayBuffer(capacity=0)

    def _remember(self, k: int, dataset: TaskDataset) -> None:
        budget = self.hp["first_budget"] if k == 0 else self.hp["later_budget"]
        self.memory.capacity += budget
        for i in select_memory(self.policy, dataset.x_train, budget, self.seed * 7919 + k):
            self.memory.items.append((dataset.x_train[i], dataset.y_train[i], k))
        self.memory.seen += len(dataset.x_train)

    def memory_blocks(self):
        x, y, t = self.memory.arrays()
        if not len(self.memory):
            return []
        return [("memory.x", x.astype("<f4"), {}), ("memory.y", y.astype("<f4"), {}), ("memory.task", t.astype("<i8"), {})]

    def load_memory(self, meta, arrays):
        self._init_memory()
        if "memory.x" in arrays:
            for x, y, t in zip(arrays["memory.x"], arrays["memory.y"], arrays["memory.task"]):
                self.memory.items.append((np.array(x, dtype=np.float32), np.array(y, dtype=np.float32), int(t)))
        self.memory.seen = int(meta.get("memory_seen", 0))
        self.memory.capacity = int(meta.get("memory_capacity", len(self.memory)))


class Replay(MemoryMixin, ContinualMethod):
    name = "replay_kmeans"
    policy = "kmeans"
    defaults = {"lr": 1e-3, "weight_decay": 1e-2, "batch_size": 1, "first_budget": 16, "later_budget": 1}

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._init_memory()

    def training_set(self, k, dataset):
        x, y = as_tensor(dataset.x_train), as_tensor(dataset.y_train)
        if not len(self.memory):
            return x, y
        mx, my, _ = self.memory.arrays()
        return torch.cat([x, as_tensor(mx)]), torch.cat([y, as_tensor(my)])

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


class ReservoirReplay(Replay):
    name = "replay_reservoir"
    policy = "reservoir"
