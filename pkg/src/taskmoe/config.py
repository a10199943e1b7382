"""Dataclass configs with JSON round-tripping, dotted overrides and validation."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError


@dataclass
class MoeConfig:
    n_experts: int = 12  # 0 -> plain LoRA (shared expert only)
    top_k: int = 2
    rank: int = 64
    shared_rank: int | None = None  # defaults to rank
    emb_width: int = 64
    n_tasks: int = 15  # includes the reserved "other" id n_tasks - 1
    task_aware: bool = True
    alpha: float | None = None  # LoRA scale alpha / r; None -> alpha = r
    init_std: float = 0.02


@dataclass
class DitConfig:
    d_in: int = 4
    d_model: int = 64
    n_heads: int = 4
    n_blocks: int = 4
    n_tgt: int = 16
    n_src: int = 16
    grid_width: int = 4  # target/reference tokens form an (n / grid_width) x grid_width grid
    time_dim: int = 32
    mlp_ratio: int = 4
    moe: MoeConfig = field(default_factory=MoeConfig)


@dataclass
class TrainConfig:
    dit: DitConfig = field(default_factory=DitConfig)
    seed: int = 0
    steps: int = 500
    batch_size: int = 12
    lr: float = 1e-3
    lam: float = 0.2  # weight on the denoising loss
    task_weight: float = 1.0  # weight on the task-contrastive loss; 0 disables it
    tau: float = 0.5
    metric: str = "sqeuclidean"  # or "cosine"
    contrastive_layers: Any = "all"  # "all" or list of block indices
    layer_reduction: str = "mean"
    exclude_self: bool = False
    workers: int = 1
    n_data_tasks: int = 5
    sampler_capacity: int = 1024
    warmup_steps: int = 400
    warmup_lr: float = 5e-3
    val_per_task: int = 256
    checkpoint_every: int = 0
    sparse: bool = True

    # ------------------------------------------------------------------
    def validate(self) -> "TrainConfig":
        d, m = self.dit, self.dit.moe
        _need(d.d_model >= 1 and d.n_heads >= 1 and d.d_model % d.n_heads == 0, "dit.n_heads",
              f"head count {d.n_heads} must divide d_model {d.d_model}")
        for name in ("d_in", "n_blocks", "n_tgt", "n_src", "grid_width", "time_dim", "mlp_ratio"):
            _need(getattr(d, name) >= 1, f"dit.{name}", "must be >= 1")
        _need(d.n_tgt % d.grid_width == 0 and d.n_src == d.n_tgt, "dit.grid_width",
              "reference and target token counts must match and fill the grid")
        _need(m.n_experts >= 0, "dit.moe.n_experts", "must be >= 0")
        if m.n_experts:
            _need(1 <= m.top_k <= m.n_experts, "dit.moe.top_k", f"need 1 <= K <= N_e={m.n_experts}")
        _need(m.rank >= 1, "dit.moe.rank", "must be >= 1")
        _need(m.shared_rank is None or m.shared_rank >= 1, "dit.moe.shared_rank", "must be >= 1")
        _need(m.n_tasks >= 1 and m.emb_width >= 1, "dit.moe.n_tasks", "task table must be non-empty")
        _need(1 <= self.n_data_tasks <= max(1, m.n_tasks - 1) or m.n_tasks == 1, "n_data_tasks",
              f"must be in [1, {m.n_tasks - 1}] (the last id is reserved)")
        _need(self.steps >= 0, "steps", "must be >= 0")
        _need(self.batch_size >= 1, "batch_size", "must be >= 1")
        if self.task_weight > 0:
            _need(self.batch_size >= 2, "batch_size", "contrastive loss needs at least 2 samples")
        _need(self.lr >= 0, "lr", "must be >= 0")
        _need(self.lam >= 0, "lam", "must be >= 0")
        _need(self.task_weight >= 0, "task_weight", "must be >= 0")
        _need(self.tau > 0, "tau", "must be > 0")
        _need(self.metric in ("sqeuclidean", "cosine"), "metric", "must be 'sqeuclidean' or 'cosine'")
        _need(self.layer_reduction in ("mean", "sum"), "layer_reduction", "must be 'mean' or 'sum'")
        layers = self.contrastive_layers
        if layers != "all":
            _need(isinstance(layers, list) and layers and all(
                isinstance(i, int) and 0 <= i < d.n_blocks for i in layers),
                "contrastive_layers", f"must be 'all' or a non-empty list of block indices < {d.n_blocks}")
        _need(1 <= self.workers <= self.batch_size, "workers", "must be in [1, batch_size]")
        _need(self.sampler_capacity >= 1, "sampler_capacity", "must be >= 1")
        _need(self.warmup_steps >= 0, "warmup_steps", "must be >= 0")
        _need(self.val_per_task >= 1, "val_per_task", "must be >= 1")
        _need(self.checkpoint_every >= 0, "checkpoint_every", "must be >= 0")
        _need(0 <= self.seed < 2**64, "seed", "must be an unsigned 64-bit integer")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return _build(cls, data, "")

    @classmethod
    def load(cls, path: str | Path, overrides: list[str] | None = None) -> "TrainConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(str(path), f"invalid JSON: {exc}") from exc
        return cls.from_dict(apply_overrides(data, overrides or []))


def _need(cond: bool, field_name: str, msg: str) -> None:
    if not cond:
        raise ConfigError(field_name, msg)


_NESTED = {"dit": DitConfig, "moe": MoeConfig}


def _build(cls, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(prefix.rstrip(".") or "<root>", "expected an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, val in data.items():
        if key not in known:
            raise ConfigError(prefix + key, "unknown field")
        if key in _NESTED:
            val = _build(_NESTED[key], val, f"{prefix}{key}.")
        else:
            default = getattr(cls(), key)
            if isinstance(default, bool) and not isinstance(val, bool):
                raise ConfigError(prefix + key, f"expected a boolean, got {val!r}")
            if isinstance(default, int) and not isinstance(default, bool) and (
                    not isinstance(val, int) or isinstance(val, bool)):
                raise ConfigError(prefix + key, f"expected an integer, got {val!r}")
            if isinstance(default, float) and not isinstance(val, (int, float)):
                raise ConfigError(prefix + key, f"expected a number, got {val!r}")
            if isinstance(default, float):
                val = float(val)
        kwargs[key] = val
    return cls(**kwargs)


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` strings; values parse as JSON, else stay strings."""
    data = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like key=value")
        key, raw = item.split("=", 1)
        try:
            val = json.loads(raw)
        except json.JSONDecodeError:
            val = raw
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(key, "cannot descend into a non-object")
        node[parts[-1]] = val
    return data
