"""Training step, seeded training loop with checkpoint/resume, and evaluation.

Randomness: every draw comes from ``stream(seed, name, step)`` with the named
sub-streams ``backbone``, ``init``, ``warmup``, ``data``, ``noise``,
``sampler`` and ``val``. Because per-step generators are derived from the
step index, resuming only needs the step and the sampler cache.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import contrastive as C
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import TrainConfig
from .data import (SamplerState, make_sources, make_synthetic_batch, make_validation_set, stream,
                   task_specs)
from .dit import DitModel, FlowBatch, diffusion_loss, dit_forward, dit_objective, flow_target
from .errors import DivergenceError, SpecError
from .moe import RoutingStats, collect_routing_stats
from .optim import Adam

RNG_SCHEME = "SeedSequence(seed, spawn_key=(crc32(stream name), step))"


# --------------------------------------------------------------------------
# backbone warm-up


_BACKBONE_MEMO: dict[str, dict[str, np.ndarray]] = {}


def _backbone_key(cfg: TrainConfig) -> str:
    d = cfg.to_dict()["dit"]
    d.pop("moe")
    return json.dumps([d, cfg.seed, cfg.warmup_steps, cfg.warmup_lr, cfg.batch_size], sort_keys=True)


def warm_backbone(cfg: TrainConfig) -> dict[str, np.ndarray]:
    """Backbone tensors after a self-supervised warm-up (x0 = src, adapters off).

    The result depends only on the backbone shape, seed and warm-up settings,
    so it is memoized and shared by every arm of an ablation.
    """
    key = _backbone_key(cfg)
    if key not in _BACKBONE_MEMO:
        d = cfg.dit
        model = DitModel.init(d, stream(cfg.seed, "backbone"), stream(cfg.seed, "init"))
        params = model.backbone_params()
        opt = Adam()
        for k in range(cfg.warmup_steps):
            rng = stream(cfg.seed, "warmup", k)
            src = make_sources(rng, cfg.batch_size, d.n_src, d.d_in)
            batch = FlowBatch(src.copy(), src, rng.standard_normal(src.shape), rng.uniform(0, 1, cfg.batch_size),
                              np.zeros(cfg.batch_size, dtype=np.int64))
            obj = dit_objective(model, batch, lam=1.0, task_weight=0.0, backbone_grads=True, use_adapters=False)
            opt.update(params, obj.grads, cfg.warmup_lr)
        _BACKBONE_MEMO[key] = {k: v.copy() for k, v in model.backbone.items()}
    return {k: v.copy() for k, v in _BACKBONE_MEMO[key].items()}


def init_model(cfg: TrainConfig) -> DitModel:
    model = DitModel.init(cfg.dit, stream(cfg.seed, "backbone"), stream(cfg.seed, "init"))
    model.backbone.update(warm_backbone(cfg))
    return model


# --------------------------------------------------------------------------
# one step


def expert_utilization(cache: dict, n_experts: int) -> list[float]:
    """Fraction of routed (token, slot) assignments per expert, pooled over layers."""
    if not n_experts or not cache["adapt"]:
        return []
    counts = np.zeros(n_experts)
    for c in cache["blocks"]:
        counts += (c["acache"].g != 0).sum(axis=(0, 1))
    return (counts / counts.sum()).tolist()


def train_step(model: DitModel, batch: FlowBatch, cfg: TrainConfig, opt: Adam, step: int = 0) -> dict:
    """One optimizer update of the trainable tensors; returns the step metrics."""
    obj = dit_objective(model, batch, lam=cfg.lam, task_weight=cfg.task_weight, tau=cfg.tau, metric=cfg.metric,
                        layers=cfg.contrastive_layers, reduction=cfg.layer_reduction,
                        exclude_self=cfg.exclude_self, workers=cfg.workers, sparse=cfg.sparse)
    params = model.trainable()
    sq = sum(float(np.sum(obj.grads[k] ** 2)) for k in params)
    if not (math.isfinite(obj.total) and math.isfinite(sq)):
        raise DivergenceError(step, f"non-finite loss or gradient (total={obj.total}, grad_sq={sq})")
    opt.update(params, obj.grads, cfg.lr)
    return {
        "step": step,
        "l_diff": obj.l_diff,
        "l_task": obj.l_task,
        "total": obj.total,
        "grad_norm": math.sqrt(sq),
        "sep_ratio": C.separability_ratio(obj.hidden[-1].h, batch.y),
        "expert_util": expert_utilization(obj.cache, cfg.dit.moe.n_experts),
    }


def step_batch(cfg: TrainConfig, sampler: SamplerState, step: int) -> FlowBatch:
    d = cfg.dit
    return make_synthetic_batch(task_specs(cfg.n_data_tasks), sampler, cfg.batch_size,
                                stream(cfg.seed, "data", step), grid_width=d.grid_width, n_tokens=d.n_tgt,
                                d_in=d.d_in, noise_rng=stream(cfg.seed, "noise", step),
                                sampler_rng=stream(cfg.seed, "sampler", step))


# --------------------------------------------------------------------------
# evaluation


@dataclass
class Evaluation:
    l_diff: float
    sep_ratio: float | None
    routing: RoutingStats | None

    def to_dict(self) -> dict:
        out = {"l_diff": self.l_diff, "sep_ratio": self.sep_ratio}
        if self.routing is not None:
            out["routing"] = self.routing.to_dict()
        return out


def validation_set(cfg: TrainConfig) -> FlowBatch:
    d = cfg.dit
    return make_validation_set(task_specs(cfg.n_data_tasks), cfg.val_per_task, cfg.seed, grid_width=d.grid_width,
                               n_tokens=d.n_tgt, d_in=d.d_in)


def evaluate(model: DitModel, val: FlowBatch, chunk: int = 256) -> Evaluation:
    """Validation l_diff, last-layer separability ratio and routing statistics."""
    n_experts = model.config.moe.n_experts
    sq = 0.0
    last, gates = [], []
    for i in range(0, len(val), chunk):
        part = val[i:i + chunk]
        v, hidden, cache = dit_forward(model, part, keep_cache=True)
        sq += diffusion_loss(v, flow_target(part.x0, part.eps)) * v.size
        last.append(hidden[-1].h)
        if n_experts:
            gates.append([c["acache"].g for c in cache["blocks"]])
    l_diff = sq / val.x0.size
    routing = None
    if n_experts:
        per_layer = [np.concatenate([g[l] for g in gates]) for l in range(model.config.n_blocks)]
        routing = collect_routing_stats(per_layer, val.y, model.config.moe.n_tasks)
    return Evaluation(l_diff, C.separability_ratio(np.concatenate(last), val.y), routing)


# --------------------------------------------------------------------------
# checkpoints


def checkpoint_tensors(model: DitModel, opt: Adam) -> dict[str, np.ndarray]:
    out = model.state()
    out.update(opt.state_tensors())
    return out


def checkpoint_meta(cfg: TrainConfig, step: int, opt: Adam, sampler: SamplerState) -> dict:
    return {"config": cfg.to_dict(), "step": step, "adam_step": opt.step, "sampler": sampler.to_dict(),
            "rng": {"seed": cfg.seed, "scheme": RNG_SCHEME, "next_step": step + 1}}


def restore(ck: Checkpoint) -> tuple[TrainConfig, DitModel, Adam, SamplerState]:
    """Rebuild (config, model, optimizer, sampler) from a checkpoint."""
    cfg = TrainConfig.from_dict(ck.config).validate()
    model = DitModel.init(cfg.dit, np.random.default_rng(0), np.random.default_rng(0))
    state = model.state()
    missing = set(state) - set(ck.tensors)
    if missing:
        raise SpecError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
    for name, arr in state.items():
        if ck.tensors[name].shape != arr.shape:
            raise SpecError(f"tensor {name} has shape {ck.tensors[name].shape}, expected {arr.shape}")
        arr[...] = ck.tensors[name]
    opt = Adam()
    opt.load_tensors(ck.tensors, int(ck.meta.get("adam_step", 0)))
    sampler = SamplerState.from_dict(ck.meta["sampler"]) if "sampler" in ck.meta else \
        SamplerState(cfg.n_data_tasks, cfg.sampler_capacity)
    return cfg, model, opt, sampler


# --------------------------------------------------------------------------
# loop


@dataclass
class RunResult:
    config: TrainConfig
    model: DitModel
    opt: Adam
    sampler: SamplerState
    metrics: list[dict] = field(default_factory=list)
    evals: dict[int, Evaluation] = field(default_factory=dict)
    checkpoints: list[Path] = field(default_factory=list)


def metrics_line(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True)


def train_loop(cfg: TrainConfig, *, out_dir: str | Path | None = None, resume: str | Path | Checkpoint | None = None,
               eval_steps: Iterable[int] = (), on_step: Callable[[dict], None] | None = None) -> RunResult:
    """Seeded end-to-end run.

    Writes ``metrics.jsonl`` (one record per step) and
    ``checkpoints/step_{k}.x2el`` (every ``checkpoint_every`` steps and at the
    end) under ``out_dir`` when given. ``eval_steps`` lists steps after which
    the validation set is evaluated (step 0 means before training).
    """
    cfg.validate()
    if resume is not None:
        ck = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        _, model, opt, sampler = restore(ck)
        start = ck.step
    else:
        model = init_model(cfg)
        opt = Adam()
        sampler = SamplerState(cfg.n_data_tasks, cfg.sampler_capacity)
        start = 0
    result = RunResult(cfg, model, opt, sampler)
    eval_steps = set(eval_steps)
    val = validation_set(cfg) if eval_steps else None
    out = Path(out_dir) if out_dir is not None else None
    log = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        mpath = out / "metrics.jsonl"
        kept = []
        if start and mpath.exists():
            kept = [ln for ln in mpath.read_text().splitlines() if json.loads(ln)["step"] <= start]
        mpath.write_text("".join(ln + "\n" for ln in kept))
        log = mpath.open("a")

    def checkpoint(step: int):
        if out is not None:
            path = save_checkpoint(out / "checkpoints" / f"step_{step}.x2el", checkpoint_tensors(model, opt),
                                   checkpoint_meta(cfg, step, opt, sampler))
            result.checkpoints.append(path)

    try:
        if 0 in eval_steps and start == 0:
            result.evals[0] = evaluate(model, val)
        for step in range(start + 1, cfg.steps + 1):
            batch = step_batch(cfg, sampler, step)
            rec = train_step(model, batch, cfg, opt, step)
            result.metrics.append(rec)
            if log is not None:
                log.write(metrics_line(rec) + "\n")
            if on_step is not None:
                on_step(rec)
            if step in eval_steps:
                result.evals[step] = evaluate(model, val)
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0 and step != cfg.steps:
                checkpoint(step)
        checkpoint(max(cfg.steps, start))
    finally:
        if log is not None:
            log.close()
    return result
