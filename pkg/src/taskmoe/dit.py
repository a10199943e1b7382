"""Miniature MMDiT-style denoiser with MoE-LoRA on every block's q/k/v.

Reference tokens and noised target tokens are concatenated along the sequence
axis and processed jointly; the velocity is read off the target positions.
The backbone is frozen; only adapters and the task table train.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .config import DitConfig
from .contrastive import HiddenBatch, multi_layer_task_loss_grad
from .errors import DimensionError, ParameterError
from .moe import (MoeLoraAttention, TaskEmbeddingTable, broadcast_task_embedding,
                  broadcast_task_embedding_vjp, moe_attention_fwd, moe_attention_vjp)


@dataclass
class FlowSample:
    x0: np.ndarray  # (n_tgt, d_in) edited target
    src: np.ndarray  # (n_src, d_in) reference
    eps: np.ndarray  # like x0
    t: float
    y: int


@dataclass
class FlowBatch:
    x0: np.ndarray  # (b, n_tgt, d_in)
    src: np.ndarray  # (b, n_src, d_in)
    eps: np.ndarray
    t: np.ndarray  # (b,)
    y: np.ndarray  # (b,)

    def __len__(self) -> int:
        return len(self.y)

    @classmethod
    def stack(cls, samples: list[FlowSample]) -> "FlowBatch":
        return cls(np.stack([s.x0 for s in samples]), np.stack([s.src for s in samples]),
                   np.stack([s.eps for s in samples]), np.array([s.t for s in samples], dtype=np.float64),
                   np.array([s.y for s in samples], dtype=np.int64))

    def __getitem__(self, idx) -> "FlowBatch":
        idx = np.atleast_1d(np.arange(len(self))[idx])
        return FlowBatch(self.x0[idx], self.src[idx], self.eps[idx], self.t[idx], self.y[idx])


def _backbone_shapes(cfg: DitConfig) -> dict[str, tuple]:
    d = cfg.d_model
    shapes = {
        "in.w": (cfg.d_in, d), "in.b": (d,), "pos": (cfg.n_tgt, d), "seg": (2, d),
        "time1.w": (cfg.time_dim, d), "time1.b": (d,), "time2.w": (d, d), "time2.b": (d,),
        "out_ln.g": (d,), "out_ln.b": (d,), "out.w": (d, cfg.d_in), "out.b": (cfg.d_in,),
    }
    for l in range(cfg.n_blocks):
        p = f"blocks.{l}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "wq": (d, d), p + "wk": (d, d), p + "wv": (d, d), p + "wo": (d, d), p + "bo": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "w1": (d, cfg.mlp_ratio * d), p + "b1": (cfg.mlp_ratio * d,),
            p + "w2": (cfg.mlp_ratio * d, d), p + "b2": (d,),
        })
    return shapes


POS_STD = 0.5


def _position_codes(bb: dict, n_src: int) -> np.ndarray:
    """Grid position i gets the same code in both streams; a segment code tells them apart."""
    pos = bb["pos"]
    return np.concatenate([pos[:n_src] + bb["seg"][0], pos + bb["seg"][1]])


def to_f32_grid(a: np.ndarray) -> np.ndarray:
    """Round in place to the nearest float32 value (kept as float64)."""
    a[...] = a.astype(np.float32).astype(np.float64)
    return a


@dataclass
class DitModel:
    config: DitConfig
    backbone: dict[str, np.ndarray]
    adapters: list[MoeLoraAttention]
    task_table: TaskEmbeddingTable

    @classmethod
    def init(cls, cfg: DitConfig, backbone_rng: np.random.Generator,
             adapter_rng: np.random.Generator) -> "DitModel":
        backbone = {}
        for name, shape in _backbone_shapes(cfg).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "g":
                backbone[name] = np.ones(shape)
            elif leaf.startswith("b") and len(shape) == 1:
                backbone[name] = np.zeros(shape)
            elif name in ("pos", "seg"):
                backbone[name] = backbone_rng.standard_normal(shape) * POS_STD
            else:
                backbone[name] = backbone_rng.standard_normal(shape) / np.sqrt(shape[0])
        m = cfg.moe
        adapters = [
            MoeLoraAttention.init(cfg.d_model, cfg.n_heads, n_experts=m.n_experts, top_k=m.top_k,
                                  rank=m.rank, shared_rank=m.shared_rank, emb_width=m.emb_width,
                                  task_aware=m.task_aware, alpha=m.alpha, std=m.init_std, rng=adapter_rng)
            for _ in range(cfg.n_blocks)
        ]
        table = TaskEmbeddingTable.init(m.n_tasks, m.emb_width, adapter_rng, m.init_std)
        model = cls(cfg, backbone, adapters, table)
        for arr in model.state().values():
            to_f32_grid(arr)
        return model

    def trainable(self) -> dict[str, np.ndarray]:
        out = {}
        for l, ad in enumerate(self.adapters):
            for name, arr in ad.params().items():
                out[f"adapters.{l}.{name}"] = arr
        if self.uses_task_table:
            out["task_table"] = self.task_table.table
        return out

    @property
    def uses_task_table(self) -> bool:
        m = self.config.moe
        return m.n_experts > 0 and m.task_aware

    def backbone_params(self) -> dict[str, np.ndarray]:
        return {f"backbone.{k}": v for k, v in self.backbone.items()}

    def state(self) -> dict[str, np.ndarray]:
        out = self.backbone_params()
        out.update(self.trainable())
        out["task_table"] = self.task_table.table
        return out

    def n_trainable(self) -> int:
        return int(sum(a.size for a in self.trainable().values()))


# --------------------------------------------------------------------------
# forward / backward


def interpolate(x0: np.ndarray, eps: np.ndarray, t: np.ndarray) -> np.ndarray:
    tt = np.asarray(t, dtype=np.float64)[:, None, None]
    return (1.0 - tt) * x0 + tt * eps


def flow_target(x0: np.ndarray, eps: np.ndarray) -> np.ndarray:
    if x0.shape != eps.shape:
        raise DimensionError(f"x0 {x0.shape} and eps {eps.shape} differ")
    return eps - x0


def diffusion_loss(v_pred: np.ndarray, u: np.ndarray) -> float:
    if v_pred.shape != u.shape:
        raise DimensionError(f"prediction {v_pred.shape} and target {u.shape} differ")
    return float(np.mean((v_pred - u) ** 2))


def diffusion_loss_grad(v_pred: np.ndarray, u: np.ndarray) -> np.ndarray:
    return 2.0 * (v_pred - u) / v_pred.size


def total_loss(l_task: float, l_diff: float, lam: float = 0.2, task_weight: float = 1.0) -> float:
    """``task_weight * l_task + lam * l_diff`` (task_weight 1 is the literal form)."""
    if lam < 0 or task_weight < 0:
        raise ParameterError("loss weights must be non-negative")
    return task_weight * l_task + lam * l_diff


def _forward_core(model: DitModel, src, x_t, t, y, use_adapters: bool, sparse: bool):
    cfg = model.config
    bb = model.backbone
    b = src.shape[0]
    if src.shape[1:] != (cfg.n_src, cfg.d_in) or x_t.shape[1:] != (cfg.n_tgt, cfg.d_in):
        raise DimensionError(f"expected src (b,{cfg.n_src},{cfg.d_in}) and target (b,{cfg.n_tgt},{cfg.d_in}); "
                             f"got {src.shape} and {x_t.shape}")
    tok = np.concatenate([src, x_t], axis=1)
    sin = nx.sinusoidal_embedding(t, cfg.time_dim)
    a1 = nx.linear(sin, bb["time1.w"], bb["time1.b"])
    tvec = nx.linear(nx.silu(a1), bb["time2.w"], bb["time2.b"])
    h = nx.linear(tok, bb["in.w"], bb["in.b"]) + _position_codes(bb, cfg.n_src) + tvec[:, None, :]
    seq = h.shape[1]
    adapt = use_adapters
    temb = None
    if adapt and model.uses_task_table:
        temb = broadcast_task_embedding(model.task_table, y, seq)
    cache = {"tok": tok, "sin": sin, "a1": a1, "temb": temb, "blocks": [], "y": y, "adapt": adapt}
    hidden = []
    for l in range(cfg.n_blocks):
        p = f"blocks.{l}."
        a, ln1 = nx.layer_norm_fwd(h, bb[p + "ln1.g"], bb[p + "ln1.b"])
        bq, bk, bv = a @ bb[p + "wq"], a @ bb[p + "wk"], a @ bb[p + "wv"]
        if adapt:
            att, acache = moe_attention_fwd(model.adapters[l], a, temb, bq, bk, bv, sparse)
        else:
            heads, acache = nx.attention_core_fwd(*(nx.split_heads(x, cfg.n_heads) for x in (bq, bk, bv)))
            att = nx.merge_heads(heads)
        h1 = h + nx.linear(att, bb[p + "wo"], bb[p + "bo"])
        m, ln2 = nx.layer_norm_fwd(h1, bb[p + "ln2.g"], bb[p + "ln2.b"])
        u = nx.linear(m, bb[p + "w1"], bb[p + "b1"])
        gu = nx.gelu(u)
        h2 = h1 + nx.linear(gu, bb[p + "w2"], bb[p + "b2"])
        cache["blocks"].append({"a": a, "ln1": ln1, "acache": acache, "att": att,
                                "m": m, "ln2": ln2, "u": u, "gu": gu})
        hidden.append(HiddenBatch(h2, y, layer=l))
        h = h2
    tgt = h[:, cfg.n_src:]
    fo, lnf = nx.layer_norm_fwd(tgt, bb["out_ln.g"], bb["out_ln.b"])
    v = nx.linear(fo, bb["out.w"], bb["out.b"])
    cache.update(fo=fo, lnf=lnf, b=b)
    return v, hidden, cache


def dit_forward(model: DitModel, batch: FlowBatch, *, use_adapters: bool = True, sparse: bool = True,
                keep_cache: bool = False):
    """Returns (v_pred (b, n_tgt, d_in), per-block HiddenBatch list[, cache])."""
    x_t = interpolate(batch.x0, batch.eps, batch.t)
    v, hidden, cache = _forward_core(model, batch.src, x_t, batch.t, batch.y, use_adapters, sparse)
    if keep_cache:
        return v, hidden, cache
    return v, hidden


def dit_backward(model: DitModel, cache: dict, dv: np.ndarray, dhidden: dict[int, np.ndarray] | None = None,
                 backbone_grads: bool = False) -> dict[str, np.ndarray]:
    """Gradients of ``<dv, v_pred> + sum_l <dhidden[l], h_l>`` by parameter name.

    Adapter and task-table gradients are always returned (when adapters were
    used); backbone gradients only on request.
    """
    cfg = model.config
    bb = model.backbone
    dhidden = dhidden or {}
    grads: dict[str, np.ndarray] = {}
    dfo, dw, db = nx.linear_vjp(cache["fo"], bb["out.w"], dv)
    if backbone_grads:
        grads["backbone.out.w"], grads["backbone.out.b"] = dw, db
    dtgt, dg, dbeta = nx.layer_norm_vjp(cache["lnf"], dfo)
    if backbone_grads:
        grads["backbone.out_ln.g"], grads["backbone.out_ln.b"] = dg, dbeta
    seq = cfg.n_src + cfg.n_tgt
    dh = np.zeros((cache["b"], seq, cfg.d_model))
    dh[:, cfg.n_src:] = dtgt
    dtemb = None
    for l in reversed(range(cfg.n_blocks)):
        p = f"blocks.{l}."
        c = cache["blocks"][l]
        if l in dhidden:
            dh = dh + dhidden[l]
        dgu, dw2, db2 = nx.linear_vjp(c["gu"], bb[p + "w2"], dh)
        du = nx.gelu_vjp(c["u"], dgu)
        dm, dw1, db1 = nx.linear_vjp(c["m"], bb[p + "w1"], du)
        dh1_ln, dg2, dbeta2 = nx.layer_norm_vjp(c["ln2"], dm)
        dh1 = dh + dh1_ln
        datt, dwo, dbo = nx.linear_vjp(c["att"], bb[p + "wo"], dh1)
        a = c["a"]
        if cache["adapt"]:
            ag, da, dt, (dbq, dbk, dbv) = moe_attention_vjp(model.adapters[l], c["acache"], datt)
            for name, val in ag.items():
                grads[f"adapters.{l}.{name}"] = val
            if dt is not None:
                dtemb = dt if dtemb is None else dtemb + dt
        else:
            heads = nx.attention_core_vjp(c["acache"], nx.split_heads(datt, cfg.n_heads))
            dbq, dbk, dbv = (nx.merge_heads(x) for x in heads)
            da = np.zeros_like(a)
        da = da + dbq @ bb[p + "wq"].T + dbk @ bb[p + "wk"].T + dbv @ bb[p + "wv"].T
        dh_ln, dg1, dbeta1 = nx.layer_norm_vjp(c["ln1"], da)
        if backbone_grads:
            flat_a = a.reshape(-1, a.shape[-1])
            grads.update({
                p + "w2": dw2, p + "b2": db2, p + "w1": dw1, p + "b1": db1,
                p + "ln2.g": dg2, p + "ln2.b": dbeta2, p + "wo": dwo, p + "bo": dbo,
                p + "wq": flat_a.T @ dbq.reshape(flat_a.shape[0], -1),
                p + "wk": flat_a.T @ dbk.reshape(flat_a.shape[0], -1),
                p + "wv": flat_a.T @ dbv.reshape(flat_a.shape[0], -1),
                p + "ln1.g": dg1, p + "ln1.b": dbeta1,
            })
        dh = dh1 + dh_ln
    if cache["adapt"] and model.uses_task_table:
        grads["task_table"] = broadcast_task_embedding_vjp(model.task_table.n_tasks, cache["y"], dtemb)
    if backbone_grads:
        for k in [k for k in grads if k.startswith("blocks.")]:
            grads["backbone." + k] = grads.pop(k)
        _, dwin, dbin = nx.linear_vjp(cache["tok"], bb["in.w"], dh)
        dtvec = dh.sum(axis=1)
        dpos = dh.sum(axis=0)
        ds1, dwt2, dbt2 = nx.linear_vjp(nx.silu(cache["a1"]), bb["time2.w"], dtvec)
        da1 = nx.silu_vjp(cache["a1"], ds1)
        _, dwt1, dbt1 = nx.linear_vjp(cache["sin"], bb["time1.w"], da1)
        grads.update({"backbone.in.w": dwin, "backbone.in.b": dbin, "backbone.pos": dpos[:cfg.n_src] + dpos[cfg.n_src:],
                      "backbone.seg": np.stack([dpos[:cfg.n_src].sum(0), dpos[cfg.n_src:].sum(0)]),
                      "backbone.time2.w": dwt2, "backbone.time2.b": dbt2,
                      "backbone.time1.w": dwt1, "backbone.time1.b": dbt1})
    return grads


@dataclass
class Objective:
    total: float
    l_diff: float
    l_task: float
    grads: dict[str, np.ndarray] | None
    hidden: list[HiddenBatch]
    cache: dict


def dit_objective(model: DitModel, batch: FlowBatch, *, lam: float = 0.2, task_weight: float = 1.0,
                  tau: float = 0.5, metric: str = "sqeuclidean", layers="all", reduction: str = "mean",
                  exclude_self: bool = False, workers: int = 1, sparse: bool = True, with_grad: bool = True,
                  backbone_grads: bool = False, use_adapters: bool = True) -> Objective:
    """``task_weight * L_task + lam * L_diff`` for one batch, with gradients on request.

    L_task is always evaluated (it is logged even when its weight is zero) but
    only differentiated when it contributes to the total.
    """
    v, hidden, cache = dit_forward(model, batch, use_adapters=use_adapters, sparse=sparse, keep_cache=True)
    u = flow_target(batch.x0, batch.eps)
    l_diff = diffusion_loss(v, u)
    task_grad = with_grad and task_weight > 0
    if len(batch) >= 2:
        l_task, dh = multi_layer_task_loss_grad(hidden, tau, metric=metric, layers=layers, reduction=reduction,
                                                exclude_self=exclude_self, workers=workers, with_grad=task_grad)
    else:
        l_task, dh = 0.0, {}
    total = total_loss(l_task, l_diff, lam, task_weight)
    grads = None
    if with_grad:
        dv = lam * diffusion_loss_grad(v, u)
        dh = {k: task_weight * g for k, g in dh.items()} if task_grad else {}
        grads = dit_backward(model, cache, dv, dh, backbone_grads)
    return Objective(total, l_diff, l_task, grads, hidden, cache)


# --------------------------------------------------------------------------
# sampling


def euler_integrate(velocity: Callable[[np.ndarray, float], np.ndarray], x1: np.ndarray,
                    steps: int) -> np.ndarray:
    """Integrate dx/dt = v(x, t) from t=1 down to t=0 with uniform Euler steps."""
    if steps < 1:
        raise ParameterError(f"steps must be >= 1, got {steps}")
    x = np.array(x1, dtype=np.float64, copy=True)
    dt = 1.0 / steps
    for i in range(steps):
        x = x - dt * velocity(x, 1.0 - i * dt)
    return x


def euler_sample(model: DitModel, src: np.ndarray, y: int, steps: int,
                 rng: np.random.Generator | int = 0) -> np.ndarray:
    """Generate target tokens (n_tgt, d_in) for one reference and task id."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    cfg = model.config
    x1 = rng.standard_normal((cfg.n_tgt, cfg.d_in))
    src_b = np.asarray(src, dtype=np.float64)[None]
    yb = np.array([y])

    def velocity(x, t):
        v, _, _ = _forward_core(model, src_b, x[None], np.array([t]), yb, True, True)
        return v[0]

    return euler_integrate(velocity, x1, steps)
