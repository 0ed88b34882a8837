"""Sequential protocol runner: train A -> B -> C -> D, evaluate after every stage.

A run owns its output directory. After every stage it writes a checkpoint
holding the model, the method state and everything recorded so far, so an
interrupted run resumes at the next stage boundary. Every source of
randomness is a deterministic function of the seed and the stage index, so
the resumed run reproduces the uninterrupted one bit for bit. Wall-clock
times live in a separate file for the same reason.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import container, taskgen
from .fno import FNO, FnoConfig, parameter_count
from .methods import METHODS, ContinualMethod, StageSettings, fit, make_method
from .metrics import EvalMatrix, MetricConfig, accuracy_r, avg_accuracy, forgetting, rel_l2
from .tensor_core import seeded_generator

log = logging.getLogger(__name__)

PAPER_EPOCHS = (3000, 1500)
DESK_EPOCHS = (300, 150)
DESK_FNO = {"hidden_channels": 16, "modes": 6}


class RunError(RuntimeError):
    pass


class ResumeMismatch(RunError):
    pass


class ReportError(ValueError):
    pass


@dataclass
class RunConfig:
    """Everything that determines a run.

    ``tasks`` lists dataset files in training order; when empty, the default
    synthetic sequence is generated from ``data_seed`` (defaults to ``seed``)
    on a ``grid``-point grid. ``pretrain`` holds the first-stage optimizer
    settings shared by every method.
    """

    method: str
    fno: dict = field(default_factory=lambda: dict(DESK_FNO))
    metric: dict = field(default_factory=dict)
    hparams: dict = field(default_factory=dict)
    tasks: list[str] = field(default_factory=list)
    epochs_first: int = PAPER_EPOCHS[0]
    epochs_later: int = PAPER_EPOCHS[1]
    seed: int = 0
    data_seed: int | None = None
    grid: int = 32
    pretrain: dict = field(default_factory=lambda: {"lr": 1e-3, "weight_decay": 0.0, "batch_size": 1})
    output_dir: str | None = None
    cache_dir: str | None = None
    resume: bool = False
    stop_after: int | None = None
    save_fields: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {sorted(METHODS)}")
        if self.epochs_first < 0 or self.epochs_later < 0:
            raise ValueError("epochs must be non-negative")
        FnoConfig(**self.fno)
        MetricConfig(**self.metric)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    def fno_config(self) -> FnoConfig:
        return FnoConfig(**self.fno)

    def metric_config(self) -> MetricConfig:
        return MetricConfig(**self.metric)

    def fingerprint(self) -> str:
        """Hash of the fields that determine results (not where they are written)."""
        d = self.to_dict()
        for k in ("output_dir", "cache_dir", "resume", "stop_after", "save_fields"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def pretrain_fingerprint(self, first: taskgen.TaskDataset) -> str:
        digest = hashlib.sha256(first.x_train.tobytes() + first.y_train.tobytes()).hexdigest()
        d = {"fno": self.fno, "metric": self.metric, "epochs": self.epochs_first, "seed": self.seed,
             "pretrain": self.pretrain, "data": digest}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class RunReport:
    method: str
    seed: int
    matrix: EvalMatrix
    rel: list[list[float]] = field(default_factory=list)
    plasticity: list[dict] = field(default_factory=list)
    params: dict = field(default_factory=dict)
    routing: list[list[float]] = field(default_factory=list)
    novelty: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @property
    def task_names(self) -> list[str]:
        return self.matrix.task_names

    def stages(self) -> int:
        return self.matrix.stages_completed()

    def derived(self) -> dict:
        """Average accuracy and forgetting for every completed stage, from the matrix alone."""
        n = self.stages()
        aa = [avg_accuracy(self.matrix, s) for s in range(n)]
        fg = []
        for s in range(1, n):
            per, mean = forgetting(self.matrix, s)
            fg.append({"stage": s, "per_task": per, "mean": mean})
        return {"avg_accuracy": aa, "forgetting": fg}

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "task_names": self.task_names,
            "eval_matrix": self.matrix.rows(),
            "rel_l2": self.rel,
            **self.derived(),
            "plasticity": self.plasticity,
            "params": self.params,
            "routing_accuracy": self.routing,
            "novelty": self.novelty,
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        names = d["task_names"]
        m = EvalMatrix(len(names), names)
        for i, row in enumerate(d["eval_matrix"]):
            for j, v in enumerate(row):
                if v is not None:
                    m[i, j] = v
        rep = cls(d["method"], d["seed"], m, d.get("rel_l2", []), d.get("plasticity", []), d.get("params", {}),
                  d.get("routing_accuracy", []), d.get("novelty", {}), d.get("config", {}))
        stored = {"avg_accuracy": d.get("avg_accuracy"), "forgetting": d.get("forgetting")}
        if stored["avg_accuracy"] is not None and stored != rep.derived():
            raise ReportError("stored metrics disagree with the evaluation matrix")
        return rep

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "RunReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


# -- data ----------------------------------------------------------------------

def load_tasks(config: RunConfig) -> list[taskgen.TaskDataset]:
    if config.tasks:
        out = []
        for p in config.tasks:
            if not Path(p).exists():
                raise FileNotFoundError(f"dataset {p} does not exist")
            out.append(taskgen.load(p))
        return out
    seed = config.seed if config.data_seed is None else config.data_seed
    return taskgen.generate_sequence(taskgen.default_sequence(seed, config.grid))


# -- evaluation ----------------------------------------------------------------

@torch.no_grad()
def evaluate_task(method: ContinualMethod, ds: taskgen.TaskDataset, k: int, split: str = "test"
                  ) -> tuple[float, float, list[np.ndarray]]:
    """Mean rel_l2 over the split (one sample at a time), routing accuracy and predictions."""
    x = torch.from_numpy(np.ascontiguousarray(getattr(ds, f"x_{split}")))
    y = getattr(ds, f"y_{split}")
    errs, hits, preds = [], [], []
    for i in range(len(x)):
        pred, used = method.infer(x[i: i + 1], k)
        preds.append(pred[0].numpy())
        errs.append(rel_l2(pred[0], y[i]))
        hits.append(used == k)
    return float(np.mean(errs)), float(np.mean(hits)), preds


@torch.no_grad()
def training_error(method: ContinualMethod, ds: taskgen.TaskDataset, k: int) -> float:
    """Mean rel_l2 on the training split using the task's own parameters."""
    x = torch.from_numpy(np.ascontiguousarray(ds.x_train))
    return float(np.mean([rel_l2(method.predict(x[i: i + 1], k)[0], ds.y_train[i]) for i in range(len(x))]))


# -- checkpoints -----------------------------------------------------------------

def _stage_path(out: Path, k: int) -> Path:
    return out / f"stage{k}.ckpt"


def save_stage(path: Path, method: ContinualMethod, config: RunConfig, stage: int, record: dict) -> None:
    blocks = [(f"model.{n}", p.detach().numpy().astype("<f4"), {}) for n, p in method.model.named_parameters()]
    blocks += [(f"state.{n}", a, attrs) for n, a, attrs in method.state_blocks()]
    meta = {"fingerprint": config.fingerprint(), "config": config.to_dict(), "stage": stage,
            "method_meta": method.state_meta(), "record": record}
    container.write(path, "run-state", blocks, meta)


def load_stage(path: Path, config: RunConfig | None = None) -> tuple[ContinualMethod, dict]:
    header, arrays = container.read(path, "run-state")
    meta = header["meta"]
    if config is not None and meta["fingerprint"] != config.fingerprint():
        raise ResumeMismatch(f"{path} was written by a different configuration")
    cfg = config or RunConfig.from_dict(meta["config"])
    method = build_method(cfg)
    with torch.no_grad():
        for n, p in method.model.named_parameters():
            p.copy_(torch.from_numpy(np.array(arrays[f"model.{n}"], dtype=np.float32)))
    method.model.requires_grad_(False)
    state = {k[len("state."):]: v for k, v in arrays.items() if k.startswith("state.")}
    method.load_state(meta["method_meta"], state)
    return method, meta


def build_method(config: RunConfig) -> ContinualMethod:
    model = FNO(config.fno_config(), seed=config.seed)
    return make_method(config.method, model, config.hparams or None, config.metric_config(), config.seed)


# -- the protocol ----------------------------------------------------------------

def _empty_record(names: list[str]) -> dict:
    return {"matrix": EvalMatrix(len(names), names).rows(), "rel": [], "plasticity": [], "routing": [],
            "added": [], "timings": []}


def _pretrain(method: ContinualMethod, config: RunConfig, first: taskgen.TaskDataset) -> None:
    """Stage 0: plain training of the backbone, optionally served from a shared cache."""
    cache = None
    if config.cache_dir:
        cache = Path(config.cache_dir) / f"pretrain-{config.pretrain_fingerprint(first)}.ckpt"
        if cache.exists():
            from .tensor_core import load_checkpoint
            values, _, _ = load_checkpoint(cache)
            method.model.param_store().load(values)
            return
    method.begin_task(0, first)
    p = config.pretrain
    settings = StageSettings(config.epochs_first, p["lr"], p.get("weight_decay", 0.0), p["batch_size"])
    if config.epochs_first:
        fit(method, 0, first, settings, seeded_generator(config.seed, 0))
    if cache is not None:
        from .tensor_core import save_checkpoint
        cache.parent.mkdir(parents=True, exist_ok=True)
        tmp = cache.with_suffix(".tmp")
        save_checkpoint(tmp, method.model.param_store(), {"fingerprint": config.pretrain_fingerprint(first)})
        tmp.replace(cache)


def run_sequence(config: RunConfig) -> RunReport:
    """Run (or resume) the protocol and return the report of the stages done so far."""
    tasks = load_tasks(config)
    names = [t.task_id for t in tasks]
    out = Path(config.output_dir) if config.output_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    start = 0
    method = None
    record = _empty_record(names)
    if config.resume and out is not None:
        done = sorted(int(p.stem[5:]) for p in out.glob("stage*.ckpt"))
        if done:
            last = done[-1]
            method, meta = load_stage(_stage_path(out, last), config)
            record = meta["record"]
            start = last + 1
            log.info("resuming %s after stage %d", config.method, last)
    if method is None:
        method = build_method(config)
    backbone = parameter_count(config.fno_config())

    matrix = EvalMatrix(len(names), names)
    for i, row in enumerate(record["matrix"]):
        for j, v in enumerate(row):
            if v is not None:
                matrix[i, j] = v

    for k in range(start, len(tasks)):
        if config.stop_after is not None and k > config.stop_after:
            break
        t0 = time.perf_counter()
        ds = tasks[k]
        if k == 0:
            _pretrain(method, config, ds)
            before = after = None
        else:
            method.begin_task(k, ds)
            before = training_error(method, ds, k)
            fit(method, k, ds, method.settings(config.epochs_later), seeded_generator(config.seed, k))
            after = training_error(method, ds, k)
        n_before = method.store().numel()
        method.end_task(k, ds)
        rel_row, route_row = [], []
        for j in range(k + 1):
            err, hit, preds = evaluate_task(method, tasks[j], j)
            rel_row.append(err)
            route_row.append(hit)
            matrix[k, j] = accuracy_r(err, config.metric_config())
            if out is not None and config.save_fields and j == k:
                _save_fields(out / f"fields_{names[j]}.bin", preds[0], tasks[j].y_test[0], names[j])
        record["rel"].append(rel_row)
        record["routing"].append(route_row)
        record["plasticity"].append({"stage": k, "before": before, "after": after,
                                     "ratio": None if before is None else after / before})
        record["added"].append(n_before - backbone)
        record["matrix"] = matrix.rows()
        record["timings"].append(time.perf_counter() - t0)
        log.info("%s stage %s done in %.1fs", config.method, names[k], record["timings"][-1])
        if out is not None:
            save_stage(_stage_path(out, k), method, config, k, record)

    report = _make_report(config, method, matrix, record, backbone)
    if out is not None:
        report.save(out / "report.json")
        (out / "timings.json").write_text(json.dumps({"stage_seconds": record["timings"]}, indent=2))
    return report


def _make_report(config, method, matrix, record, backbone) -> RunReport:
    added = [a - (record["added"][i - 1] if i else 0) for i, a in enumerate(record["added"])]
    params = {"backbone": backbone, "added_per_stage": added,
              "added_ratio_per_stage": [a / backbone for a in added]}
    novelty = {str(k): v for k, v in sorted(getattr(method, "novelty", {}).items())}
    routing = record["routing"] if method.task_agnostic else []
    cfg = config.to_dict()
    for k in ("output_dir", "cache_dir", "resume", "stop_after"):
        cfg.pop(k)
    return RunReport(config.method, config.seed, matrix, record["rel"], record["plasticity"], params,
                     routing, novelty, cfg)


def _save_fields(path: Path, pred: np.ndarray, target: np.ndarray, name: str) -> None:
    pred = np.asarray(pred, dtype="<f4")
    target = np.asarray(target, dtype="<f4")
    blocks = [("prediction", pred, {}), ("target", target, {}), ("abs_error", np.abs(pred - target), {})]
    container.write(path, "fields", blocks, {"task": name})


# -- rendering -------------------------------------------------------------------

def write_pgm(path: str | Path, field2d: np.ndarray) -> None:
    """8-bit binary PGM, min-max scaled."""
    f = np.asarray(field2d, dtype=np.float64)
    if f.ndim == 3:
        f = f[0]
    lo, hi = float(f.min()), float(f.max())
    img = np.zeros_like(f) if hi == lo else (f - lo) / (hi - lo)
    data = np.round(img * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def summary_rows(report: RunReport) -> list[dict]:
    if report.stages() == 0:
        raise ReportError("report has no completed stage")
    d = report.derived()
    rows = []
    for s in range(report.stages()):
        row = {"stage": report.task_names[s], "avg_accuracy": d["avg_accuracy"][s]}
        for j in range(s + 1):
            row[f"R_{report.task_names[j]}"] = report.matrix[s, j]
        if s:
            f = d["forgetting"][s - 1]
            for j, v in enumerate(f["per_task"]):
                row[f"F_{report.task_names[j]}"] = v
            row["mean_forgetting"] = f["mean"]
        rows.append(row)
    return rows


def render(report: RunReport, out_dir: str | Path, fields_dir: str | Path | None = None) -> list[Path]:
    """Write accuracy/summary tables (CSV and JSON) and, if available, field images."""
    import csv

    rows = summary_rows(report)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    p = out / "accuracy_matrix.csv"
    p.write_text(report.matrix.to_csv())
    written.append(p)
    cols = ["stage", "avg_accuracy"] + [f"R_{n}" for n in report.task_names] + \
           [f"F_{n}" for n in report.task_names[:-1]] + ["mean_forgetting"]
    p = out / "summary.csv"
    with open(p, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: (repr(r[c]) if isinstance(r.get(c), float) else r.get(c, "")) for c in cols})
    written.append(p)
    p = out / "summary.json"
    p.write_text(json.dumps(rows, indent=2))
    written.append(p)
    if fields_dir is not None:
        for f in sorted(Path(fields_dir).glob("fields_*.bin")):
            header, arrays = container.read(f, "fields")
            for key in ("prediction", "target", "abs_error"):
                img = out / f"{f.stem}_{key}.pgm"
                write_pgm(img, arrays[key])
                written.append(img)
    return written
