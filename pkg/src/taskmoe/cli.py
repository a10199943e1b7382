"""Command-line entry point.

Exit codes: 0 success, 1 verification or ablation failure, 2 usage or
validation error. Every command writes ``manifest.json`` under ``--out``
(default ``$X2EDIT_OUT`` or ``runs``) holding the fully resolved config.
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .config import TrainConfig, apply_overrides
from .errors import (ConfigError, DimensionError, FormatError, LabelError, ParameterError, ShardError, SpecError,
                     TaskMoeError, VersionError)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad flags, files or values; maps to exit code 2."""


# --------------------------------------------------------------------------
# helpers


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def build_id() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"taskmoe-{__version__}-{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"taskmoe-{__version__}"


def resolve_config(args) -> TrainConfig:
    data: dict = {}
    if args.config is not None:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    data = apply_overrides(data, args.override or [])
    for flag in ("seed", "steps", "workers"):
        val = getattr(args, flag, None)
        if val is not None:
            data[flag] = val
    return TrainConfig.from_dict(data).validate()


def write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


class Run:
    """Collects the manifest of one command invocation."""

    def __init__(self, command: str, args, argv):
        self.out = Path(args.out)
        self.manifest = {"command": command, "argv": list(argv), "started": _now(), "build_id": build_id(),
                         "config": None, "outputs": {}}

    def output(self, key: str, value):
        self.manifest["outputs"][key] = str(value) if isinstance(value, Path) else value

    def finish(self, code: int):
        self.manifest.update(finished=_now(), exit_code=code)
        self.out.mkdir(parents=True, exist_ok=True)
        write_json(self.out / "manifest.json", self.manifest)
        return code


def _load_ck(path):
    from .checkpoint import load_checkpoint
    if path is None:
        raise UsageError("--checkpoint is required")
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


# --------------------------------------------------------------------------
# commands


def cmd_train(args, run: Run) -> int:
    from .trainer import train_loop
    cfg = resolve_config(args)
    run.manifest["config"] = cfg.to_dict()
    run.output("metrics", run.out / "metrics.jsonl")

    def progress(rec):
        if args.log_every and rec["step"] % args.log_every == 0:
            print(f"step {rec['step']:5d}  total {rec['total']:.5f}  l_diff {rec['l_diff']:.5f}  "
                  f"l_task {rec['l_task']:.5f}", flush=True)

    res = train_loop(cfg, out_dir=run.out, resume=args.resume, on_step=progress)
    run.output("checkpoints", [str(p) for p in res.checkpoints])
    print(f"wrote {len(res.metrics)} metric records and {len(res.checkpoints)} checkpoint(s) to {run.out}")
    return EXIT_OK


def cmd_gradcheck(args, run: Run) -> int:
    from .gradcheck import SCOPES, run_suite
    if args.scope not in SCOPES + ("all",):
        raise UsageError(f"unknown scope {args.scope!r}")
    seed = args.seed if args.seed is not None else 0
    run.manifest["config"] = {"scope": args.scope, "seed": seed, "corrupt": sorted(args.corrupt or [])}
    reports = run_suite(args.scope, seed=seed, corrupt=set(args.corrupt or []))
    for r in reports:
        print(r)
    failed = [r.op for r in reports if not r.passed]
    path = write_json(run.out / "tables" / "gradcheck.json",
                      [{"op": r.op, "max_rel_error": r.max_rel_error, "probes": r.probes, "tolerance": r.tolerance,
                        "passed": r.passed} for r in reports])
    run.output("table", path)
    if failed:
        print("failing ops: " + ", ".join(failed))
        return EXIT_FAIL
    return EXIT_OK


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"expected a comma-separated list of integers, got {text!r}") from exc


def cmd_verify_contrastive(args, run: Run) -> int:
    from .verify import verify_contrastive
    seed = args.seed if args.seed is not None else 0
    sizes = _int_list(args.batch_sizes)
    workers = _int_list(args.workers_list) if args.workers is None else [args.workers]
    run.manifest["config"] = {"batch_sizes": sizes, "workers": workers, "tau": args.tau, "trials": args.trials,
                              "seed": seed}
    checks = verify_contrastive(sizes, workers, args.tau, args.trials, seed)
    for c in checks:
        print(c)
    run.output("table", write_json(run.out / "tables" / "verify_contrastive.json", [c.to_dict() for c in checks]))
    failed = [c for c in checks if not c.passed]
    if failed:
        print("worst-case deltas of failing checks: " + ", ".join(f"{c.name}={c.worst:.3e}" for c in failed))
        return EXIT_FAIL
    return EXIT_OK


def cmd_route_stats(args, run: Run) -> int:
    from .data import SamplerState, make_synthetic_batch, stream, task_specs
    from .dit import dit_forward
    from .moe import collect_routing_stats
    from .trainer import restore
    cfg, model, _, _ = restore(_load_ck(args.checkpoint))
    m = cfg.dit.moe
    if m.n_experts == 0:
        raise UsageError("checkpoint holds a plain LoRA model; there is no routing to report")
    seed = args.seed if args.seed is not None else cfg.seed
    run.manifest["config"] = {"checkpoint": str(args.checkpoint), "batches": args.batches, "seed": seed,
                              "train_config": cfg.to_dict()}
    specs = task_specs(cfg.n_data_tasks)
    sampler = SamplerState(len(specs), cfg.sampler_capacity)
    gates, labels = [[] for _ in range(cfg.dit.n_blocks)], []
    for i in range(args.batches):
        batch = make_synthetic_batch(specs, sampler, cfg.batch_size, stream(seed, "route", i),
                                     grid_width=cfg.dit.grid_width, n_tokens=cfg.dit.n_tgt, d_in=cfg.dit.d_in)
        _, _, cache = dit_forward(model, batch, keep_cache=True)
        for l, c in enumerate(cache["blocks"]):
            gates[l].append(c["acache"].g)
        labels.append(batch.y)
    y = np.concatenate(labels)
    stats = collect_routing_stats([np.concatenate(g) for g in gates], y, m.n_tasks)
    out = stats.to_dict()
    seq = cfg.dit.n_src + cfg.dit.n_tgt
    per_layer = stats.counts.sum(axis=(1, 2))
    out["counts_audit"] = {"expected_per_layer": int(len(y) * seq * m.top_k),
                           "per_layer": [int(c) for c in per_layer],
                           "ok": bool(np.all(per_layer == len(y) * seq * m.top_k))}
    run.output("table", write_json(run.out / "tables" / "route_stats.json", out))
    print(json.dumps(out, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_sample(args, run: Run) -> int:
    from .data import default_task_specs, lookup_spec, make_sources, stream
    from .dit import euler_sample
    from .trainer import restore
    cfg, model, _, _ = restore(_load_ck(args.checkpoint))
    n_tasks = cfg.dit.moe.n_tasks
    if args.task is None or not 0 <= args.task < n_tasks:
        raise UsageError(f"--task must be in [0, {n_tasks}), got {args.task}")
    steps = args.steps if args.steps is not None else 32
    if steps < 1:
        raise UsageError("--steps must be >= 1 for sampling")
    seed = args.seed if args.seed is not None else 0
    run.manifest["config"] = {"checkpoint": str(args.checkpoint), "task": args.task, "steps": steps, "seed": seed,
                              "train_config": cfg.to_dict()}
    d = cfg.dit
    src = make_sources(stream(seed, "sample_src"), 1, d.n_src, d.d_in)[0]
    x = euler_sample(model, src, args.task, steps, stream(seed, "sample_noise"))
    art = {"task": args.task, "steps": steps, "seed": seed, "src": src.tolist(), "x0_hat": x.tolist()}
    try:
        ref = lookup_spec(default_task_specs(), args.task).apply(src, d.grid_width)
        art["x0_ref"] = ref.tolist()
        art["mse_vs_ref"] = float(np.mean((x - ref) ** 2))
    except SpecError:
        art["x0_ref"] = None  # the reserved "other" task has no generator
    path = write_json(run.out / "tables" / f"sample_task{args.task}_seed{seed}_steps{steps}.json", art)
    run.output("sample", path)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_ablate(args, run: Run) -> int:
    from .ablation import AblationGrid, format_table, run_ablation
    if args.grid is None:
        raise UsageError("--grid is required")
    path = Path(args.grid)
    if not path.is_file():
        raise UsageError(f"grid file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"grid file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError("grid must be a JSON object")
    base = apply_overrides(data.get("base", {}), args.override or [])
    for flag in ("seed", "steps", "workers"):
        val = getattr(args, flag, None)
        if val is not None:
            base[flag] = val
    data["base"] = base
    grid = AblationGrid.from_dict(data)
    run.manifest["config"] = {"grid": data, "resolved_base": TrainConfig.from_dict(base).to_dict()}

    def progress(row):
        print(f"arm {row['name']}: {row['status']} in {row['seconds']:.1f}s"
              + (f" ({row['error']})" if row["error"] else ""), flush=True)

    rows = run_ablation(grid, progress=progress)
    text = format_table(rows)
    print(text)
    run.output("table", write_json(run.out / "tables" / "ablation.json", rows))
    txt = run.out / "tables" / "ablation.txt"
    txt.write_text(text + "\n")
    run.output("text_table", txt)
    return EXIT_FAIL if any(r["status"] != "ok" for r in rows) else EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "gradcheck": cmd_gradcheck,
    "verify-contrastive": cmd_verify_contrastive,
    "route-stats": cmd_route_stats,
    "sample": cmd_sample,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (defaults are materialised)")
    common.add_argument("--out", default=os.environ.get("X2EDIT_OUT", "runs"), help="output directory")
    common.add_argument("--seed", type=int, help="64-bit seed")
    common.add_argument("--steps", type=int, help="training steps (Euler steps for 'sample')")
    common.add_argument("--workers", type=int, help="simulated workers for the sharded loss")
    common.add_argument("--override", action="append", metavar="KEY=VALUE", help="dotted config override")

    p = argparse.ArgumentParser(prog="taskmoe", description="Task-aware MoE-LoRA toy editing model")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    t = sub.add_parser("train", parents=[common], help="run the training loop")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--log-every", type=int, default=50)
    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suites")
    g.add_argument("--scope", default="all", help="gate | experts | contrastive | dit | all")
    g.add_argument("--corrupt", action="append", help=argparse.SUPPRESS)  # test hook
    v = sub.add_parser("verify-contrastive", parents=[common], help="contrastive oracle and sharding suites")
    v.add_argument("--batch-sizes", default="2,4,8")
    v.add_argument("--workers-list", default="1,2,4")
    v.add_argument("--tau", type=float, default=0.5)
    v.add_argument("--trials", type=int, default=50)
    r = sub.add_parser("route-stats", parents=[common], help="routing statistics of a checkpoint")
    r.add_argument("--checkpoint")
    r.add_argument("--batches", type=int, default=4)
    s = sub.add_parser("sample", parents=[common], help="generate target tokens for one reference")
    s.add_argument("--checkpoint")
    s.add_argument("--task", type=int)
    a = sub.add_parser("ablate", parents=[common], help="run an ablation grid")
    a.add_argument("--grid", help="grid JSON file")
    return p


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    args = build_parser().parse_args(argv)
    run = Run(args.command, args, argv)
    try:
        code = COMMANDS[args.command](args, run)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return run.finish(EXIT_USAGE)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return run.finish(EXIT_USAGE)
    except (FormatError, VersionError) as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return run.finish(EXIT_USAGE)
    except TaskMoeError as exc:
        if isinstance(exc, (ParameterError, SpecError, LabelError, DimensionError, ShardError)):
            print(f"invalid input: {exc}", file=sys.stderr)
            return run.finish(EXIT_USAGE)
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return run.finish(EXIT_FAIL)
    return run.finish(code)


if __name__ == "__main__":
    sys.exit(main())
