"""Command-line entry point: ``clfno {taskgen,run,eval,report}``.

Failures exit with status 1 (2 for usage errors) and print one JSON record
``{"error": <type>, "message": <text>, "command": <subcommand>}`` on stderr.
Set ``CLFNO_SEED`` to override the seed of every command.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch

SEED_ENV = "CLFNO_SEED"


def _seed_override() -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ValueError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def cmd_taskgen(args) -> dict:
    from . import taskgen

    seed = _seed_override()
    if args.spec:
        specs = taskgen.load_spec_file(args.spec)
        if seed is not None:
            specs = [taskgen.TaskSpec.from_dict({**s.to_dict(), "seed": seed * 1000 + i + 1}) for i, s in enumerate(specs)]
    else:
        specs = taskgen.default_sequence(args.seed if seed is None else seed, args.grid)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for ds in taskgen.generate_sequence(specs):
        p = out / f"{ds.task_id}.bin"
        taskgen.save(ds, p)
        paths.append(str(p))
    manifest = {"tasks": paths}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def cmd_run(args) -> dict:
    from .bench import RunConfig, run_sequence

    data = json.loads(Path(args.config).read_text())
    if args.output_dir:
        data["output_dir"] = args.output_dir
    if args.resume:
        data["resume"] = True
    seed = _seed_override()
    if seed is not None:
        data["seed"] = seed
    config = RunConfig.from_dict(data)
    if not config.output_dir:
        raise ValueError("the run needs an output_dir (config key or --output-dir)")
    report = run_sequence(config)
    d = report.derived()
    return {"output_dir": config.output_dir, "stages": report.stages(), "avg_accuracy": d["avg_accuracy"],
            "mean_forgetting": [f["mean"] for f in d["forgetting"]]}


def cmd_eval(args) -> dict:
    from . import taskgen
    from .bench import evaluate_task, load_stage
    from .metrics import accuracy_r

    method, meta = load_stage(Path(args.checkpoint))
    ds = taskgen.load(args.dataset)
    stage = int(meta["stage"])
    task = args.task if args.task is not None else stage
    if task > stage:
        raise ValueError(f"checkpoint after stage {stage} has not learned task {task}")
    err, hit, _ = evaluate_task(method, ds, task, args.split)
    return {"task": task, "split": args.split, "rel_l2": err, "accuracy": accuracy_r(err, method.metric_cfg),
            "routing_accuracy": hit if method.task_agnostic else None}


def cmd_report(args) -> dict:
    from .bench import RunReport, render

    report = RunReport.load(args.report)
    fields = Path(args.report).parent if args.images else None
    written = render(report, args.out, fields)
    return {"written": [str(p) for p in written]}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clfno", description="Continual operator learning benchmark")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("taskgen", help="generate task datasets")
    t.add_argument("--spec", help="JSON task-sequence file (default: built-in 4-task sequence)")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--grid", type=int, default=32)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_taskgen)

    r = sub.add_parser("run", help="run the sequential protocol")
    r.add_argument("--config", required=True)
    r.add_argument("--output-dir")
    r.add_argument("--resume", action="store_true")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="evaluate a stage checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--task", type=int, help="task index (default: the checkpoint's last stage)")
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.set_defaults(func=cmd_eval)

    rp = sub.add_parser("report", help="render tables and images from a report file")
    rp.add_argument("--report", required=True)
    rp.add_argument("--out", required=True)
    rp.add_argument("--images", action="store_true", help="also write PGM field images")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.set_num_threads(1)
    try:
        result = args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes an error record
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}) + "\n")
        return 1
    sys.stdout.write(json.dumps(result, indent=2) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
