"""Seeded synthetic field-regression tasks and their on-disk format.

Each sample starts from a band-limited random field on a periodic grid whose
Fourier coefficients mix a task-level template with per-sample noise, so
inputs of one task resemble each other the way flows in one geometry do. A
fixed advection-smoothing recurrence turns it into five correlated
snapshots; the target is a saturating functional of the snapshots (mean
field plus local gradient energy). Tasks differ in amplitude, wavenumber
band, spectral decay and the coefficient of the target map, so the input
regimes of different tasks do not overlap.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import container

NUM_SNAPSHOTS = 5
ADVECTION = (0.05, 0.025)  # domain fraction travelled per snapshot step (rows, columns)
DIFFUSIVITY = 0.005  # per snapshot step, per (cycles per domain)^2
GRADIENT_SCALE = (2 * np.pi * 3.0) ** 2
GRADIENT_WEIGHT = 0.5


@dataclass(frozen=True)
class TaskSpec:
    """Generator parameters of one task.

    ``amplitude``, ``band`` and ``decay`` are closed intervals sampled per
    sample; ``band`` bounds the wavenumber magnitude (cycles per domain).
    ``nonlinearity`` is the coefficient inside the saturating target map.
    ``coherence`` in [0, 1] is the weight of the shared task template in every
    sample's coefficients (0 gives independent random phases).
    """

    task_id: str
    amplitude: tuple[float, float]
    band: tuple[float, float]
    decay: tuple[float, float]
    nonlinearity: float
    n_train: int
    n_test: int
    seed: int
    grid: int = 32
    coherence: float = 0.0

    def __post_init__(self):
        for name in ("amplitude", "band", "decay"):
            lo, hi = getattr(self, name)
            if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
                raise ValueError(f"{self.task_id}: invalid {name} interval ({lo}, {hi})")
        if self.amplitude[0] <= 0:
            raise ValueError(f"{self.task_id}: amplitude must be positive")
        if self.band[0] < 1 or self.band[1] > self.grid // 2 - 1:
            raise ValueError(f"{self.task_id}: band must lie within [1, grid/2 - 1]")
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError(f"{self.task_id}: sample counts must be >= 1")
        if not 0.0 <= self.coherence <= 1.0:
            raise ValueError(f"{self.task_id}: coherence must lie in [0, 1]")
        if self.grid < 8:
            raise ValueError("grid must be at least 8")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("amplitude", "band", "decay"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        d = dict(d)
        for k in ("amplitude", "band", "decay"):
            d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class TaskDataset:
    task_id: str
    x_train: np.ndarray  # (N, 7, H, W) float32
    y_train: np.ndarray  # (N, 1, H, W) float32
    x_test: np.ndarray
    y_test: np.ndarray
    spec: TaskSpec | None = None

    @property
    def grid(self) -> int:
        return self.x_train.shape[-1]


def default_sequence(seed: int = 0, grid: int = 32) -> list[TaskSpec]:
    """Four tasks A -> D with the split sizes 160/40 then 8/2 each.

    Task A is broad; B, C and D are narrow and out of A's regime. D uses the
    highest wavenumber band.
    """
    return [
        TaskSpec("A", amplitude=(0.5, 1.0), band=(1.0, 3.0), decay=(0.5, 2.0), nonlinearity=1.0,
                 n_train=160, n_test=40, seed=seed * 1000 + 1, grid=grid, coherence=0.9),
        TaskSpec("B", amplitude=(1.6, 1.9), band=(2.0, 4.0), decay=(1.0, 1.5), nonlinearity=0.4,
                 n_train=8, n_test=2, seed=seed * 1000 + 2, grid=grid, coherence=0.95),
        TaskSpec("C", amplitude=(2.2, 2.5), band=(1.0, 2.5), decay=(1.0, 1.5), nonlinearity=-0.4,
                 n_train=8, n_test=2, seed=seed * 1000 + 3, grid=grid, coherence=0.95),
        TaskSpec("D", amplitude=(1.15, 1.35), band=(4.0, 6.0), decay=(1.0, 1.5), nonlinearity=-1.0,
                 n_train=8, n_test=2, seed=seed * 1000 + 4, grid=grid, coherence=0.95),
    ]


def check_disjoint(specs: list[TaskSpec]) -> None:
    """Every pair of tasks must have disjoint intervals along at least one axis."""
    for a in range(len(specs)):
        for b in range(a + 1, len(specs)):
            sa, sb = specs[a], specs[b]
            if not any(
                getattr(sa, ax)[1] < getattr(sb, ax)[0] or getattr(sb, ax)[1] < getattr(sa, ax)[0]
                for ax in ("amplitude", "band", "decay")
            ):
                raise ValueError(f"tasks {sa.task_id} and {sb.task_id} overlap on every axis")


def _wavenumbers(n: int) -> tuple[np.ndarray, np.ndarray]:
    k = np.fft.fftfreq(n, d=1.0 / n)
    return k[:, None], k[None, :]


def complex_noise(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))


def random_field(rng: np.random.Generator, n: int, band: tuple[float, float], decay: float, amplitude: float,
                 template: np.ndarray | None = None, coherence: float = 0.0) -> np.ndarray:
    """Periodic real field with power confined to ``band`` and RMS equal to ``amplitude``.

    Coefficients are ``coherence * template + sqrt(1 - coherence^2) * noise``
    shaped by the band mask and the ``|k|^-decay`` envelope.
    """
    ky, kx = _wavenumbers(n)
    kmag = np.hypot(ky, kx)
    mask = (kmag >= band[0]) & (kmag <= band[1])
    weight = np.where(mask, np.maximum(kmag, 1.0) ** (-decay), 0.0)
    noise = complex_noise(rng, n)
    if template is not None and coherence > 0:
        noise = coherence * template + np.sqrt(1.0 - coherence ** 2) * noise
    coef = weight * noise
    f = np.fft.ifft2(coef).real
    rms = np.sqrt(np.mean(f ** 2))
    return f * (amplitude / rms)


def evolve(field0: np.ndarray, steps: int = NUM_SNAPSHOTS) -> np.ndarray:
    """Snapshots of the fixed advection-smoothing recurrence, shape (steps, H, W)."""
    n = field0.shape[0]
    ky, kx = _wavenumbers(n)
    shift = np.exp(-2j * np.pi * (ky * ADVECTION[0] + kx * ADVECTION[1]))
    damp = np.exp(-DIFFUSIVITY * (ky ** 2 + kx ** 2))
    step = shift * damp
    spec = np.fft.fft2(field0)
    out = np.empty((steps, n, n))
    for t in range(steps):
        out[t] = np.fft.ifft2(spec).real
        spec = spec * step
    return out


def _central_gradient_sq(f: np.ndarray) -> np.ndarray:
    n = f.shape[-1]
    gy, gx = np.gradient(f, 1.0 / (n - 1), axis=(-2, -1))
    return gy ** 2 + gx ** 2


def target_functional(snapshots: np.ndarray, nonlinearity: float) -> np.ndarray:
    """tanh(c * mean snapshot) + w * tanh(mean squared gradient / scale), shape (H, W)."""
    mean = snapshots.mean(axis=0)
    energy = np.mean([_central_gradient_sq(s) for s in snapshots], axis=0)
    return np.tanh(nonlinearity * mean) + GRADIENT_WEIGHT * np.tanh(energy / GRADIENT_SCALE)


def coordinate_channels(n: int) -> np.ndarray:
    line = np.linspace(0.0, 1.0, n)
    yy, xx = np.meshgrid(line, line, indexing="ij")
    return np.stack([xx, yy])


def task_template(spec: TaskSpec) -> np.ndarray:
    """Complex coefficients shared by all samples of a task."""
    return complex_noise(np.random.default_rng([spec.seed, 0x7E3]), spec.grid)


def _sample(rng: np.random.Generator, spec: TaskSpec, template: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    amp = rng.uniform(*spec.amplitude)
    decay = rng.uniform(*spec.decay)
    snaps = evolve(random_field(rng, spec.grid, spec.band, decay, amp, template, spec.coherence))
    x = np.concatenate([snaps, coordinate_channels(spec.grid)], axis=0)
    y = target_functional(snaps, spec.nonlinearity)[None]
    return x.astype(np.float32), y.astype(np.float32)


def generate(spec: TaskSpec) -> TaskDataset:
    rng = np.random.default_rng(spec.seed)
    template = task_template(spec)
    pairs = [_sample(rng, spec, template) for _ in range(spec.n_train + spec.n_test)]
    xs = np.stack([p[0] for p in pairs])
    ys = np.stack([p[1] for p in pairs])
    if not (np.isfinite(xs).all() and np.isfinite(ys).all()):
        raise FloatingPointError("generator produced non-finite values")
    k = spec.n_train
    return TaskDataset(spec.task_id, xs[:k], ys[:k], xs[k:], ys[k:], spec)


def generate_sequence(specs: list[TaskSpec]) -> list[TaskDataset]:
    check_disjoint(specs)
    return [generate(s) for s in specs]


def recompute_target(x: np.ndarray, nonlinearity: float) -> np.ndarray:
    """Target of one input sample recomputed from its snapshot channels."""
    return target_functional(np.asarray(x[:NUM_SNAPSHOTS], dtype=np.float64), nonlinearity)[None]


# -- persistence -------------------------------------------------------------

def save(dataset: TaskDataset, path: str | Path) -> None:
    meta = {
        "task_id": dataset.task_id,
        "counts": {"train": int(len(dataset.x_train)), "test": int(len(dataset.x_test))},
        "input_shape": list(dataset.x_train.shape[1:]),
        "target_shape": list(dataset.y_train.shape[1:]),
        "spec": dataset.spec.to_dict() if dataset.spec else None,
    }
    blocks = [(name, getattr(dataset, name).astype("<f4"), {})
              for name in ("x_train", "y_train", "x_test", "y_test")]
    container.write(path, "dataset", blocks, meta)


def load(path: str | Path) -> TaskDataset:
    header, arrays = container.read(path, "dataset")
    meta = header["meta"]
    spec = TaskSpec.from_dict(meta["spec"]) if meta.get("spec") else None
    ds = TaskDataset(meta["task_id"], *(arrays[k].astype(np.float32) for k in ("x_train", "y_train", "x_test", "y_test")), spec=spec)
    if len(ds.x_train) != meta["counts"]["train"] or len(ds.x_test) != meta["counts"]["test"]:
        raise container.ContainerError("sample counts disagree with the header")
    return ds


def load_spec_file(path: str | Path) -> list[TaskSpec]:
    """Read a JSON task-sequence file: ``{"tasks": [TaskSpec fields, ...]}``."""
    data = json.loads(Path(path).read_text())
    return [TaskSpec.from_dict(t) for t in data["tasks"]]
