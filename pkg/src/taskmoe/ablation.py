"""Ablation runner: paired training runs over a grid of config overrides.

Grid format (JSON)::

    {"base": {<TrainConfig fields, nested>},
     "arms": [{"name": "moe_ta", "overrides": {"dit.moe.n_experts": 12}},
              {"name": "lora", "overrides": {"dit.moe.n_experts": 0}, "match_budget": "moe_ta"}]}

``match_budget`` sets the arm's rank so its trainable-parameter count is as
close as possible to the named arm's. Every arm shares the base seed, so data,
validation set and backbone are identical across arms.
"""
from __future__ import annotations

import json
import math
import time
import traceback
from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig, apply_overrides
from .dit import DitModel
from .errors import ConfigError
from .trainer import train_loop


@dataclass
class AblationArm:
    name: str
    overrides: dict = field(default_factory=dict)
    match_budget: str | None = None


@dataclass
class AblationGrid:
    base: dict
    arms: list[AblationArm]
    eval_early: int = 100  # step at which the early separability ratio is recorded

    @classmethod
    def from_dict(cls, data: dict) -> "AblationGrid":
        if not isinstance(data, dict) or not isinstance(data.get("arms"), list) or not data["arms"]:
            raise ConfigError("arms", "grid needs a non-empty 'arms' list")
        arms = []
        for i, a in enumerate(data["arms"]):
            if not isinstance(a, dict) or not isinstance(a.get("name"), str) or not a["name"]:
                raise ConfigError(f"arms[{i}].name", "every arm needs a non-empty string name")
            unknown = set(a) - {"name", "overrides", "match_budget"}
            if unknown:
                raise ConfigError(f"arms[{i}]", f"unknown keys {sorted(unknown)}")
            arms.append(AblationArm(a["name"], dict(a.get("overrides", {})), a.get("match_budget")))
        names = [a.name for a in arms]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise ConfigError("arms", f"duplicate arm names: {dupes}")
        for a in arms:
            if a.match_budget is not None and a.match_budget not in names:
                raise ConfigError(f"arms.{a.name}.match_budget", f"no arm named {a.match_budget!r}")
        unknown = set(data) - {"base", "arms", "eval_early"}
        if unknown:
            raise ConfigError("<grid>", f"unknown keys {sorted(unknown)}")
        grid = cls(dict(data.get("base", {})), arms, int(data.get("eval_early", 100)))
        for a in arms:  # fail fast on bad overrides
            grid.arm_config(a)
        return grid

    def arm_config(self, arm: AblationArm, budget_rank: int | None = None) -> TrainConfig:
        data = apply_overrides(self.base, [f"{k}={json.dumps(v)}" for k, v in arm.overrides.items()])
        cfg = TrainConfig.from_dict(data)
        if budget_rank is not None:
            cfg.dit.moe.rank = budget_rank
            cfg.dit.moe.shared_rank = None
        return cfg.validate()


def trainable_count(cfg: TrainConfig) -> int:
    rng = np.random.default_rng(0)
    return DitModel.init(cfg.dit, rng, rng).n_trainable()


def budget_rank(cfg: TrainConfig, target: int) -> int:
    """Rank whose trainable count is closest to ``target`` (the count is affine in the rank)."""
    c = TrainConfig.from_dict(cfg.to_dict())
    c.dit.moe.shared_rank = None
    c.dit.moe.rank = 1
    n1 = trainable_count(c)
    c.dit.moe.rank = 2
    slope = trainable_count(c) - n1
    return max(1, int(round((target - n1) / slope)) + 1)


def run_ablation(grid: AblationGrid | dict, progress=None) -> list[dict]:
    """Train every arm; one row per arm. Failures are recorded, not raised."""
    grid = grid if isinstance(grid, AblationGrid) else AblationGrid.from_dict(grid)
    counts = {a.name: trainable_count(grid.arm_config(a)) for a in grid.arms}
    rows = []
    for arm in grid.arms:
        start = time.perf_counter()
        row: dict = {"name": arm.name, "status": "ok", "error": None}
        try:
            rank = None
            if arm.match_budget is not None:
                rank = budget_rank(grid.arm_config(arm), counts[arm.match_budget])
            cfg = grid.arm_config(arm, rank)
            m = cfg.dit.moe
            row.update(n_experts=m.n_experts, top_k=m.top_k if m.n_experts else None, rank=m.rank,
                       task_aware=m.task_aware, task_weight=cfg.task_weight, metric=cfg.metric,
                       steps=cfg.steps, n_trainable=trainable_count(cfg))
            early = grid.eval_early if 0 < grid.eval_early < cfg.steps else None
            res = train_loop(cfg, eval_steps={s for s in (early, cfg.steps) if s is not None})
            final = res.evals[cfg.steps]
            row.update(val_l_diff=final.l_diff, sep_ratio=final.sep_ratio,
                       sep_ratio_early=res.evals[early].sep_ratio if early else None, eval_early=early,
                       final_total=res.metrics[-1]["total"] if res.metrics else None)
            if final.routing is not None:
                ent = final.routing.task_entropy()[:cfg.n_data_tasks]
                row.update(routing_entropy_min=float(np.nanmin(ent)), routing_entropy_mean=float(np.nanmean(ent)),
                           routing_entropy_per_task=[float(e) for e in ent], max_entropy=math.log(m.n_experts))
            else:
                row.update(routing_entropy_min=None, routing_entropy_mean=None, routing_entropy_per_task=None,
                           max_entropy=None)
        except Exception as exc:  # an arm failure is data, not a crash
            row.update(status="failed", error=f"{type(exc).__name__}: {exc}",
                       traceback=traceback.format_exc(limit=3))
        row["seconds"] = round(time.perf_counter() - start, 3)
        rows.append(row)
        if progress is not None:
            progress(row)
    return rows


TABLE_COLUMNS = ("name", "status", "n_experts", "rank", "n_trainable", "val_l_diff", "sep_ratio_early", "sep_ratio",
                 "routing_entropy_min", "seconds")


def format_table(rows: list[dict], columns=TABLE_COLUMNS) -> str:
    """Aligned plain-text rendering of the ablation rows."""
    def cell(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.5g}"
        return str(v)

    body = [[cell(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines)
