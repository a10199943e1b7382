"""Finite-difference suites for every hand-written backward pass.

Each check builds a small float64 problem at a tie-free routing point
(top-K margin well above the probe step), contracts the output with a fixed
random cotangent and compares analytic gradients against central differences.
"""
from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from . import contrastive as C
from . import moe
from . import numerics as nx
from .config import DitConfig, MoeConfig
from . import dit
from .dit import DitModel, FlowBatch, dit_forward

SCOPES = ("gate", "experts", "contrastive", "dit")
TOL = 1e-4
PROBES = 50


def _check_params(name: str, params: dict[str, np.ndarray], loss: Callable[[], float],
                  grads: dict[str, np.ndarray], rng, probes: int, corrupt: bool) -> nx.GradCheckReport:
    """Probe ``probes`` coordinates spread across ``params`` (mutated and restored in place)."""
    keys = list(params)
    sizes = np.array([params[k].size for k in keys])
    picks = rng.choice(sizes.sum(), size=min(probes, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    h = nx.FD_STEP
    for flat in picks:
        i = int(np.searchsorted(offsets, flat, side="right") - 1)
        arr = params[keys[i]].reshape(-1)
        j = flat - offsets[i]
        orig = arr[j]
        arr[j] = orig + h
        fp = loss()
        arr[j] = orig - h
        fm = loss()
        arr[j] = orig
        fd = (fp - fm) / (2 * h)
        a = float(grads[keys[i]].reshape(-1)[j])
        if corrupt:
            a = a * 1.5 + 1e-3
        worst = max(worst, nx.rel_error(a, fd))
    return nx.GradCheckReport(name, worst, len(picks), TOL)


def _tie_margin(s: np.ndarray, k: int) -> float:
    top = np.sort(s, axis=-1)[..., ::-1]
    if k >= s.shape[-1]:
        return np.inf
    return float(np.min(top[..., k - 1] - top[..., k]))


def _layer_problem(seed: int):
    """Random layer + inputs whose routing is at least 1e-3 away from a tie."""
    rng = np.random.default_rng(seed)
    while True:
        layer = moe.MoeLoraAttention.init(8, 2, n_experts=4, top_k=2, rank=3, emb_width=4, rng=rng)
        for arr in layer.params().values():
            arr[...] = rng.standard_normal(arr.shape) * 0.4
        table = moe.TaskEmbeddingTable(rng.standard_normal((3, 4)))
        y = np.array([0, 2])
        h = rng.standard_normal((2, 4, 8))
        bases = [rng.standard_normal((2, 4, 8)) for _ in range(3)]
        temb = moe.broadcast_task_embedding(table, y, 4)
        if _tie_margin(moe.gate_scores(layer.gate, h, temb), 2) > 1e-3:
            return rng, layer, table, y, h, bases


def _layer_reports(seed: int, which: str, corrupt: set[str], probes: int) -> Iterator[nx.GradCheckReport]:
    rng, layer, table, y, h, bases = _layer_problem(seed)
    w = rng.standard_normal((2, 4, 8))
    inputs = {"h": h, "base_q": bases[0], "base_k": bases[1], "base_v": bases[2]}

    def forward():
        temb = moe.broadcast_task_embedding(table, y, 4)
        return moe.moe_attention_fwd(layer, inputs["h"], temb, inputs["base_q"], inputs["base_k"],
                                     inputs["base_v"])

    def loss():
        return float((forward()[0] * w).sum())

    out, cache = forward()
    g, dh, dtemb, dbase = moe.moe_attention_vjp(layer, cache, w)
    g["task_table"] = moe.broadcast_task_embedding_vjp(3, y, dtemb)
    g.update({"h": dh, "base_q": dbase[0], "base_k": dbase[1], "base_v": dbase[2]})
    p = layer.params()
    p["task_table"] = table.table
    p.update(inputs)
    if which == "gate":
        name = "gate_path"
        yield _check_params(name, {k: p[k] for k in ("gate.weight", "gate.bias", "task_table")},
                            loss, g, rng, probes, name in corrupt)
    else:
        name = "expert_mix"
        keys = [k for k in p if ".experts." in k or ".shared." in k]
        yield _check_params(name, {k: p[k] for k in keys}, loss, g, rng, probes, name in corrupt)
        name = "moe_attention"
        yield _check_params(name, {k: p[k] for k in ("h", "base_q", "base_k", "base_v")},
                            loss, g, rng, probes, name in corrupt)


def _contrastive_reports(seed: int, corrupt: set[str], probes: int) -> Iterator[nx.GradCheckReport]:
    rng = np.random.default_rng(seed)
    for metric in ("sqeuclidean", "cosine"):
        h = rng.standard_normal((8, 4, 3))
        y = np.array([0, 0, 1, 1, 2, 2, 0, 3])
        _, _, g = C.task_infonce_grad(h, y, 0.5, metric)
        params = {"h": h.copy()}

        def loss(params=params, metric=metric):
            z = C.flatten_normalize(params["h"])
            return C.task_infonce(C.pairwise_distance(z, metric), C.build_task_mask(y)[0], 0.5)[0]

        name = f"task_infonce[{metric}]"
        yield _check_params(name, params, loss, {"h": g}, rng, probes, name in corrupt)
    h = rng.standard_normal((8, 2, 4))
    y = np.array([0, 1, 0, 1, 2, 2, 0, 1])
    sb_params = {"h": h.copy()}
    _, res = C.sharded_task_infonce(C.ShardedBatch.split(C.HiddenBatch(h, y), 4), with_grad=True)
    g = sum(r.grad for r in res)

    def sloss():
        return C.sharded_task_infonce(C.ShardedBatch.split(C.HiddenBatch(sb_params["h"], y), 4))[0]

    name = "sharded_task_infonce[W=4]"
    yield _check_params(name, sb_params, sloss, {"h": g}, rng, probes, name in corrupt)


def small_dit_config(**moe_kw) -> DitConfig:
    m = dict(n_experts=4, top_k=2, rank=3, emb_width=4, n_tasks=4)
    m.update(moe_kw)
    return DitConfig(d_in=2, d_model=8, n_heads=2, n_blocks=2, n_tgt=4, n_src=4, grid_width=2, time_dim=8,
                     mlp_ratio=2, moe=MoeConfig(**m))


def random_dit_problem(seed: int, cfg: DitConfig | None = None, b: int = 4, margin: float = 1e-3):
    """A small model with random (nonzero) adapters and a batch at a tie-free routing point."""
    cfg = cfg or small_dit_config()
    rng = np.random.default_rng(seed)
    while True:
        model = DitModel.init(cfg, rng, rng)
        for arr in model.trainable().values():
            arr[...] = rng.standard_normal(arr.shape) * 0.5
        batch = FlowBatch(rng.standard_normal((b, cfg.n_tgt, cfg.d_in)), rng.standard_normal((b, cfg.n_src, cfg.d_in)),
                          rng.standard_normal((b, cfg.n_tgt, cfg.d_in)), rng.uniform(0.05, 0.95, b),
                          np.array([i % 2 for i in range(b)]))
        if cfg.moe.n_experts == 0 or _dit_margin(model, batch) > margin:
            return rng, model, batch


def _dit_margin(model: DitModel, batch: FlowBatch) -> float:
    _, _, cache = dit_forward(model, batch, keep_cache=True)
    return min(_tie_margin(c["acache"].s, model.config.moe.top_k) for c in cache["blocks"])


def dit_objective(model: DitModel, batch: FlowBatch, lam: float = 0.2, task_weight: float = 1.0, tau: float = 0.5,
                  metric: str = "sqeuclidean", layers="all", workers: int = 1, with_grad: bool = True,
                  backbone_grads: bool = False):
    """(total loss, gradients or None) for one batch."""
    obj = dit.dit_objective(model, batch, lam=lam, task_weight=task_weight, tau=tau, metric=metric, layers=layers,
                            workers=workers, with_grad=with_grad, backbone_grads=backbone_grads)
    return obj.total, obj.grads


def _dit_reports(seed: int, corrupt: set[str], probes: int) -> Iterator[nx.GradCheckReport]:
    rng, model, batch = random_dit_problem(seed)
    _, grads = dit_objective(model, batch)
    name = "total_loss"
    yield _check_params(name, model.trainable(), lambda: dit_objective(model, batch, with_grad=False)[0],
                        grads, rng, probes, name in corrupt)
    _, grads = dit_objective(model, batch, backbone_grads=True)
    name = "total_loss[backbone]"
    yield _check_params(name, model.backbone_params(), lambda: dit_objective(model, batch, with_grad=False)[0],
                        grads, rng, probes, name in corrupt)


def run_suite(scope: str = "all", seed: int = 0, corrupt: set[str] | None = None,
              probes: int = PROBES) -> list[nx.GradCheckReport]:
    """Run the named scope ("all" for every one); ``corrupt`` names reports to sabotage."""
    corrupt = corrupt or set()
    scopes = SCOPES if scope == "all" else (scope,)
    reports: list[nx.GradCheckReport] = []
    for s in scopes:
        if s == "gate":
            reports += _layer_reports(seed, "gate", corrupt, probes)
        elif s == "experts":
            reports += _layer_reports(seed, "experts", corrupt, probes)
        elif s == "contrastive":
            reports += _contrastive_reports(seed, corrupt, probes)
        elif s == "dit":
            reports += _dit_reports(seed, corrupt, probes)
        else:
            raise ValueError(f"unknown scope {s!r}; expected one of {SCOPES + ('all',)}")
    return reports
