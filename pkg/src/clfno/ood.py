"""Task identification from raw inputs: random Fourier features + per-task KPCA.

Each known task owns a detector: the mean and leading principal directions
of its training inputs in an RFF feature space approximating a Gaussian
kernel. A new input is scored by its reconstruction residual under every
detector; the smallest score names the task, and an input that every
detector rejects is novel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import container

NOVEL = -1


def _flatten(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(len(x), -1)


def normalize_rows(x) -> np.ndarray:
    """Vectorize each sample and scale it to unit l2 norm."""
    v = _flatten(x)
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cannot normalize a zero-norm input")
    return v / norms


def median_bandwidth(x) -> float:
    """Median pairwise distance between normalized samples."""
    v = normalize_rows(x)
    sq = np.sum(v * v, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * v @ v.T, 0.0)
    iu = np.triu_indices(len(v), 1)
    if not len(iu[0]):
        raise ValueError("need at least two samples")
    sigma = float(np.median(np.sqrt(d2[iu])))
    if sigma <= 0:
        raise ValueError("all samples coincide after normalization")
    return sigma


@dataclass
class RffMap:
    """z(x) = sqrt(2/D) cos(Omega^T x' + b) with Omega ~ N(0, 1/sigma^2), b ~ U[0, 2 pi)."""

    input_dim: int
    sigma: float
    num_features: int = 4096
    seed: int = 0
    omega: np.ndarray = field(init=False, repr=False)
    phase: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.sigma <= 0 or self.num_features < 1:
            raise ValueError("sigma and the feature count must be positive")
        rng = np.random.default_rng(self.seed)
        self.omega = (rng.standard_normal((self.input_dim, self.num_features), dtype=np.float32)
                      / np.float32(self.sigma))
        self.phase = rng.uniform(0.0, 2 * np.pi, self.num_features)

    def __call__(self, x) -> np.ndarray:
        return rff_map(x, self)


def rff_map(x, fmap: RffMap) -> np.ndarray:
    """Feature rows (N, D) for a batch of inputs (any trailing shape)."""
    v = normalize_rows(x)
    if v.shape[1] != fmap.input_dim:
        raise ValueError(f"inputs have {v.shape[1]} entries, map expects {fmap.input_dim}")
    proj = (v.astype(np.float32) @ fmap.omega).astype(np.float64)
    return np.sqrt(2.0 / fmap.num_features) * np.cos(proj + fmap.phase)


@dataclass
class KpcaModel:
    task_id: int
    mean: np.ndarray  # (D,)
    directions: np.ndarray  # (K, D), orthonormal rows
    eigenvalues: np.ndarray  # (K,) of the centered second moment, descending
    threshold: float = float("inf")

    @property
    def k(self) -> int:
        return len(self.directions)


def _spectrum(z: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mean, descending eigenvalues and unit eigenvectors (rows) of the centered second moment."""
    n, d = z.shape
    mean = z.mean(axis=0)
    zc = z - mean
    if n <= d:
        # Gram form: eigenvectors a of Zc Zc^T map to directions Zc^T a / sqrt(lambda)
        lam, a = np.linalg.eigh(zc @ zc.T)
        lam, a = lam[::-1], a[:, ::-1]
        good = lam > lam[0] * 1e-12 if lam[0] > 0 else np.zeros_like(lam, dtype=bool)
        lam, a = lam[good], a[:, good]
        u = (zc.T @ a / np.sqrt(lam)).T
        # one re-orthonormalization pass against rounding
        q, r = np.linalg.qr(u.T)
        u = (q * np.sign(np.diag(r))).T
    else:
        lam, v = np.linalg.eigh(zc.T @ zc)
        lam, v = lam[::-1], v[:, ::-1]
        good = lam > lam[0] * 1e-12 if lam[0] > 0 else np.zeros_like(lam, dtype=bool)
        lam, u = lam[good], v[:, good].T
    return mean, lam / n, u


def choose_k(eigenvalues: np.ndarray, energy: float, n: int) -> int:
    if len(eigenvalues) == 0:
        return 0
    frac = np.cumsum(eigenvalues) / np.sum(eigenvalues)
    k = int(np.searchsorted(frac, energy - 1e-12) + 1)
    return min(k, n - 1, len(eigenvalues))


def kpca_fit(features, k: int | None = None, task_id: int = 0, energy: float = 0.99) -> KpcaModel:
    """Principal directions of centered feature rows.

    ``k=None`` picks the smallest count reaching ``energy`` of the variance.
    """
    z = np.asarray(features, dtype=np.float64)
    n = len(z)
    if n < 2:
        raise ValueError("need at least two samples")
    if k is not None and (k < 0 or k > n - 1):
        raise ValueError(f"K={k} exceeds N-1={n - 1}")
    mean, lam, u = _spectrum(z)
    if k is None:
        k = choose_k(lam, energy, n)
    k = min(k, len(lam))
    return KpcaModel(task_id, mean, u[:k].copy(), lam[:k].copy())


def ood_score(z, model: KpcaModel) -> np.ndarray | float:
    """Residual norm of ``z`` after projection onto the detector's affine subspace."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    zc = np.atleast_2d(z) - model.mean
    resid = zc - (zc @ model.directions.T) @ model.directions
    s = np.linalg.norm(resid, axis=1)
    return float(s[0]) if single else s


def calibrate_threshold(train_scores, margin: float = 1.5) -> float:
    s = np.asarray(train_scores, dtype=np.float64)
    if s.size < 2:
        raise ValueError("need at least two training scores")
    tau = float(s.max()) * margin
    return tau if tau > 0 else float(np.finfo(float).tiny)


@dataclass
class RouterState:
    fmap: RffMap
    detectors: list[KpcaModel] = field(default_factory=list)
    global_threshold: float | None = None

    def add(self, model: KpcaModel) -> None:
        if any(d.task_id == model.task_id for d in self.detectors):
            raise ValueError(f"task {model.task_id} already has a detector")
        self.detectors.append(model)

    def scores(self, x) -> np.ndarray:
        """(N, T) matrix of scores of every input under every detector."""
        z = rff_map(x, self.fmap)
        return np.stack([np.atleast_1d(ood_score(z, d)) for d in self.detectors], axis=1)

    def thresholds(self) -> np.ndarray:
        if self.global_threshold is not None:
            return np.full(len(self.detectors), self.global_threshold)
        return np.array([d.threshold for d in self.detectors])


def route_scores(scores, thresholds, task_ids, detect_novel: bool = True) -> list[int]:
    s = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    if s.shape[1] == 0:
        raise ValueError("no detectors to route with")
    tau = np.asarray(thresholds, dtype=np.float64)
    out = []
    for row in s:
        if detect_novel and np.all(row > tau):
            out.append(NOVEL)
        else:
            out.append(int(task_ids[int(np.argmin(row))]))
    return out


def route(x, state: RouterState, detect_novel: bool = True) -> list[int]:
    """Task id per input (argmin score), or ``NOVEL`` when every detector rejects it."""
    if not state.detectors:
        raise ValueError("router has no detectors")
    return route_scores(state.scores(x), state.thresholds(), [d.task_id for d in state.detectors], detect_novel)


def held_out_scores(z: np.ndarray, k: int | None, energy: float, folds: int = 5) -> np.ndarray:
    """Score of every row under a detector fitted without that row's fold.

    In-sample residuals vanish once K reaches N-1, so thresholds are
    calibrated on these cross-validated scores instead.
    """
    n = len(z)
    folds = min(folds, n)
    out = np.empty(n)
    for f in range(folds):
        test = np.arange(f, n, folds)
        train = np.setdiff1d(np.arange(n), test)
        if len(train) < 2:
            raise ValueError("need at least three samples to calibrate a threshold")
        kk = None if k is None else min(k, len(train) - 1)
        out[test] = ood_score(z[test], kpca_fit(z[train], kk, energy=energy))
    return out


def fit_detector(x, fmap: RffMap, task_id: int, k: int | None = None, energy: float = 0.99,
                 margin: float = 1.5) -> KpcaModel:
    """Detector for one task with its threshold calibrated on held-out training scores."""
    z = rff_map(x, fmap)
    model = kpca_fit(z, k, task_id, energy)
    model.threshold = calibrate_threshold(held_out_scores(z, k, energy), margin)
    return model


# -- persistence -------------------------------------------------------------

def save_detector(path: str | Path, model: KpcaModel, fmap: RffMap) -> None:
    meta = {"task_id": model.task_id, "num_features": fmap.num_features, "k": model.k, "sigma": fmap.sigma,
            "seed": fmap.seed, "input_dim": fmap.input_dim, "threshold": model.threshold}
    blocks = [("mean", model.mean.astype("<f8"), {}), ("directions", model.directions.astype("<f8"), {}),
              ("eigenvalues", model.eigenvalues.astype("<f8"), {})]
    container.write(path, "detector", blocks, meta)


def load_detector(path: str | Path) -> tuple[KpcaModel, dict]:
    header, arrays = container.read(path, "detector")
    meta = header["meta"]
    model = KpcaModel(int(meta["task_id"]), arrays["mean"], arrays["directions"].reshape(int(meta["k"]), -1),
                      arrays["eigenvalues"], float(meta["threshold"]))
    return model, meta


def router_blocks(state: RouterState) -> tuple[list, dict]:
    """Blocks and metadata to persist a router inside another container."""
    blocks, meta = [], {"sigma": state.fmap.sigma, "num_features": state.fmap.num_features,
                        "seed": state.fmap.seed, "input_dim": state.fmap.input_dim, "detectors": []}
    for d in state.detectors:
        blocks += [(f"router.{d.task_id}.mean", d.mean.astype("<f8"), {}),
                   (f"router.{d.task_id}.directions", d.directions.astype("<f8"), {}),
                   (f"router.{d.task_id}.eigenvalues", d.eigenvalues.astype("<f8"), {})]
        meta["detectors"].append({"task_id": d.task_id, "k": d.k, "threshold": d.threshold})
    return blocks, meta


def router_from_blocks(meta: dict, arrays: dict) -> RouterState:
    fmap = RffMap(int(meta["input_dim"]), float(meta["sigma"]), int(meta["num_features"]), int(meta["seed"]))
    state = RouterState(fmap)
    for d in meta["detectors"]:
        t = d["task_id"]
        state.add(KpcaModel(t, np.array(arrays[f"router.{t}.mean"]),
                            np.array(arrays[f"router.{t}.directions"]).reshape(int(d["k"]), -1),
                            np.array(arrays[f"router.{t}.eigenvalues"]), float(d["threshold"])))
    return state
