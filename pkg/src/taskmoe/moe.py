"""Task-conditioned mixture of low-rank experts on the q/k/v projections.

Per layer, a single gate reads ``concat(h, task_embedding)`` and produces
softmax scores over ``n_experts``; only the top-K scores survive (no
renormalisation) and weight the low-rank experts of every projection. A
shared expert per projection is always applied. The mixed outputs are added
to the frozen backbone projections before attention.

``n_experts == 0`` degenerates to a plain LoRA (shared expert only, no gate).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import DimensionError, LabelError, ParameterError

PROJECTIONS = ("q", "k", "v")


# --------------------------------------------------------------------------
# parameter containers


@dataclass
class TaskEmbeddingTable:
    table: np.ndarray  # (n_tasks, width)

    @property
    def n_tasks(self) -> int:
        return self.table.shape[0]

    @property
    def width(self) -> int:
        return self.table.shape[1]

    @classmethod
    def init(cls, n_tasks: int, width: int, rng: np.random.Generator, std: float = 0.02):
        if n_tasks < 1 or width < 1:
            raise ParameterError("task table needs n_tasks >= 1 and width >= 1")
        return cls(rng.standard_normal((n_tasks, width)) * std)


@dataclass
class LoraExpert:
    down: np.ndarray  # (d, r)
    up: np.ndarray  # (r, d)
    scale: float = 1.0

    def __call__(self, h: np.ndarray) -> np.ndarray:
        return (h @ self.down) @ self.up * self.scale

    @classmethod
    def init(cls, d: int, rank: int, rng, std: float = 0.02, alpha: float | None = None):
        if rank < 1:
            raise ParameterError(f"LoRA rank must be >= 1, got {rank}")
        alpha = float(rank) if alpha is None else alpha
        return cls(rng.standard_normal((d, rank)) * std, np.zeros((rank, d)), alpha / rank)


@dataclass
class ExpertBank:
    """``n`` same-shaped LoRA experts stored as stacked arrays."""

    down: np.ndarray  # (n, d, r)
    up: np.ndarray  # (n, r, d)
    scale: float = 1.0

    def __len__(self) -> int:
        return self.down.shape[0]

    def __getitem__(self, i: int) -> LoraExpert:
        return LoraExpert(self.down[i], self.up[i], self.scale)

    @classmethod
    def init(cls, n: int, d: int, rank: int, rng, std: float = 0.02, alpha: float | None = None):
        if rank < 1:
            raise ParameterError(f"LoRA rank must be >= 1, got {rank}")
        alpha = float(rank) if alpha is None else alpha
        return cls(rng.standard_normal((n, d, rank)) * std, np.zeros((n, rank, d)), alpha / rank)


@dataclass
class GateNetwork:
    weight: np.ndarray  # (d + c, n_experts)
    bias: np.ndarray  # (n_experts,)

    @property
    def in_width(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init(cls, in_width: int, n_experts: int, rng, std: float = 0.02):
        return cls(rng.standard_normal((in_width, n_experts)) * std, np.zeros(n_experts))


@dataclass
class MoeLoraAttention:
    experts: dict[str, ExpertBank | None]
    shared: dict[str, LoraExpert]
    gate: GateNetwork | None
    top_k: int
    n_heads: int
    task_aware: bool = True

    @property
    def n_experts(self) -> int:
        bank = self.experts["q"]
        return 0 if bank is None else len(bank)

    @classmethod
    def init(cls, d: int, n_heads: int, *, n_experts: int = 12, top_k: int = 2, rank: int = 64,
             shared_rank: int | None = None, emb_width: int = 64, task_aware: bool = True,
             alpha: float | None = None, std: float = 0.02, rng: np.random.Generator):
        if d % n_heads:
            raise DimensionError(f"head count {n_heads} does not divide width {d}")
        if n_experts and not 1 <= top_k <= n_experts:
            raise ParameterError(f"need 1 <= K <= N_e, got K={top_k}, N_e={n_experts}")
        shared_rank = rank if shared_rank is None else shared_rank
        experts, shared = {}, {}
        for x in PROJECTIONS:
            experts[x] = ExpertBank.init(n_experts, d, rank, rng, std, alpha) if n_experts else None
            shared[x] = LoraExpert.init(d, shared_rank, rng, std, alpha)
        gate = None
        if n_experts:
            gate = GateNetwork.init(d + (emb_width if task_aware else 0), n_experts, rng, std)
        return cls(experts, shared, gate, top_k, n_heads, task_aware)

    def params(self) -> dict[str, np.ndarray]:
        """Trainable arrays by name (live references)."""
        out: dict[str, np.ndarray] = {}
        if self.gate is not None:
            out["gate.weight"] = self.gate.weight
            out["gate.bias"] = self.gate.bias
        for x in PROJECTIONS:
            if self.experts[x] is not None:
                out[f"{x}.experts.down"] = self.experts[x].down
                out[f"{x}.experts.up"] = self.experts[x].up
            out[f"{x}.shared.down"] = self.shared[x].down
            out[f"{x}.shared.up"] = self.shared[x].up
        return out


# --------------------------------------------------------------------------
# forward chain: embedding -> gate -> top-K -> expert mix -> attention


def broadcast_task_embedding(table: TaskEmbeddingTable, y: np.ndarray, n: int) -> np.ndarray:
    """(b,) labels -> (b, n, c): each sample's task row repeated over its tokens."""
    y = np.asarray(y)
    if y.ndim != 1 or np.any(y < 0) or np.any(y >= table.n_tasks):
        raise LabelError(f"task labels must lie in [0, {table.n_tasks}), got {y.tolist()}")
    return np.broadcast_to(table.table[y][:, None, :], (len(y), n, table.width)).copy()


def broadcast_task_embedding_vjp(n_tasks: int, y: np.ndarray, dout: np.ndarray) -> np.ndarray:
    dtable = np.zeros((n_tasks, dout.shape[-1]))
    np.add.at(dtable, np.asarray(y), dout.sum(axis=1))
    return dtable


def _gate_input(h: np.ndarray, temb: np.ndarray | None) -> np.ndarray:
    return h if temb is None else np.concatenate([h, temb], axis=-1)


def gate_scores(gate: GateNetwork, h: np.ndarray, temb: np.ndarray | None) -> np.ndarray:
    x = _gate_input(h, temb)
    if x.shape[-1] != gate.in_width:
        raise DimensionError(f"gate expects width {gate.in_width}, got {x.shape[-1]}")
    return nx.softmax(nx.linear(x, gate.weight, gate.bias), axis=-1)


def topk_gate(s: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Keep the K largest scores per token, zero the rest; returns (g, mask).

    Ties resolve toward the lowest expert index, so exactly K entries survive.
    """
    n_e = s.shape[-1]
    if not 1 <= k <= n_e:
        raise ParameterError(f"need 1 <= K <= {n_e}, got {k}")
    order = np.argsort(-s, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(s.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return np.where(mask, s, 0.0), mask


def expert_mix_fwd(bank: ExpertBank | None, shared: LoraExpert, g: np.ndarray | None,
                   h: np.ndarray, sparse: bool = True):
    """``sum_i g_i * expert_i(h) + shared(h)``; zero-weight experts are skipped."""
    shape = h.shape
    h2 = h.reshape(-1, shape[-1])
    a_s = h2 @ shared.down
    out = a_s @ shared.up * shared.scale
    acts = []
    if bank is not None:
        g2 = g.reshape(-1, g.shape[-1])
        every = np.arange(h2.shape[0])
        for i in range(len(bank)):
            rows = np.flatnonzero(g2[:, i]) if sparse else every
            if rows.size == 0:
                acts.append((rows, None))
                continue
            a = h2[rows] @ bank.down[i]
            out[rows] += g2[rows, i, None] * (a @ bank.up[i] * bank.scale)
            acts.append((rows, a))
    return out.reshape(shape), (h2, a_s, acts)


def expert_mix(bank, shared, g, h, sparse: bool = True) -> np.ndarray:
    return expert_mix_fwd(bank, shared, g, h, sparse)[0]


def expert_mix_vjp(bank: ExpertBank | None, shared: LoraExpert, g: np.ndarray | None,
                   cache, dout: np.ndarray):
    """Returns (dh, dg, grads). ``dg`` is only filled where g is nonzero."""
    h2, a_s, acts = cache
    d2 = dout.reshape(-1, dout.shape[-1])
    grads = {"shared.up": a_s.T @ d2 * shared.scale}
    da_s = d2 @ shared.up.T * shared.scale
    grads["shared.down"] = h2.T @ da_s
    dh = da_s @ shared.down.T
    dg = None
    if bank is not None:
        g2 = g.reshape(-1, g.shape[-1])
        dg = np.zeros_like(g2)
        ddown = np.zeros_like(bank.down)
        dup = np.zeros_like(bank.up)
        for i, (rows, a) in enumerate(acts):
            if a is None:
                continue
            go = d2[rows]
            dg[rows, i] = ((a @ bank.up[i] * bank.scale) * go).sum(axis=1)
            do = go * g2[rows, i, None]
            dup[i] = a.T @ do * bank.scale
            da = do @ bank.up[i].T * bank.scale
            ddown[i] = h2[rows].T @ da
            dh[rows] += da @ bank.down[i].T
        grads["experts.down"] = ddown
        grads["experts.up"] = dup
        dg = dg.reshape(g.shape)
    return dh.reshape(dout.shape), dg, grads


@dataclass
class MoeCache:
    h: np.ndarray
    temb: np.ndarray | None
    s: np.ndarray | None
    g: np.ndarray | None
    mask: np.ndarray | None
    mix: dict = field(default_factory=dict)
    attn: tuple = ()


def moe_attention_fwd(layer: MoeLoraAttention, h: np.ndarray, temb: np.ndarray | None,
                      base_q: np.ndarray, base_k: np.ndarray, base_v: np.ndarray,
                      sparse: bool = True):
    """attention(base_q + q_moe, base_k + k_moe, base_v + v_moe), heads merged."""
    if h.shape[-1] % layer.n_heads:
        raise DimensionError(f"head count {layer.n_heads} does not divide width {h.shape[-1]}")
    s = g = mask = None
    if layer.gate is not None:
        s = gate_scores(layer.gate, h, temb if layer.task_aware else None)
        g, mask = topk_gate(s, layer.top_k)
    cache = MoeCache(h, temb, s, g, mask)
    proj = {}
    for x, base in zip(PROJECTIONS, (base_q, base_k, base_v)):
        mixed, cache.mix[x] = expert_mix_fwd(layer.experts[x], layer.shared[x], g, h, sparse)
        proj[x] = nx.split_heads(base + mixed, layer.n_heads)
    out, cache.attn = nx.attention_core_fwd(proj["q"], proj["k"], proj["v"])
    return nx.merge_heads(out), cache


def moe_attention(layer, h, temb, base_q, base_k, base_v, sparse: bool = True) -> np.ndarray:
    return moe_attention_fwd(layer, h, temb, base_q, base_k, base_v, sparse)[0]


def moe_attention_vjp(layer: MoeLoraAttention, cache: MoeCache, dout: np.ndarray):
    """Backward of ``moe_attention_fwd``.

    Returns (grads by parameter name, dh, dtemb, (dbase_q, dbase_k, dbase_v)).
    The top-K mask is treated as constant.
    """
    heads = nx.attention_core_vjp(cache.attn, nx.split_heads(dout, layer.n_heads))
    dbase = tuple(nx.merge_heads(d) for d in heads)
    grads: dict[str, np.ndarray] = {}
    dh = np.zeros_like(cache.h)
    dg = None if cache.g is None else np.zeros_like(cache.g)
    for x, dx in zip(PROJECTIONS, dbase):
        dhx, dgx, gx = expert_mix_vjp(layer.experts[x], layer.shared[x], cache.g, cache.mix[x], dx)
        dh += dhx
        if dgx is not None:
            dg += dgx
        for name, val in gx.items():
            grads[f"{x}.{name}"] = val
    dtemb = None
    if layer.gate is not None:
        ds = np.where(cache.mask, dg, 0.0)
        dlogits = nx.softmax_vjp(cache.s, ds)
        temb = cache.temb if layer.task_aware else None
        x_in = _gate_input(cache.h, temb)
        dx_in, dw, db = nx.linear_vjp(x_in, layer.gate.weight, dlogits)
        grads["gate.weight"] = dw
        grads["gate.bias"] = db
        d = cache.h.shape[-1]
        dh += dx_in[..., :d]
        if temb is not None:
            dtemb = dx_in[..., d:]
    return grads, dh, dtemb, dbase


# --------------------------------------------------------------------------
# routing statistics


@dataclass
class RoutingStats:
    counts: np.ndarray  # (L, n_tasks, n_experts) nonzero-gate counts
    tokens: np.ndarray  # (L, n_tasks) routed token counts

    @property
    def expert_totals(self) -> np.ndarray:
        return self.counts.sum(axis=(0, 1))

    def layer_entropy(self) -> np.ndarray:
        """(L, n_tasks) utilisation entropy in nats; NaN for tasks never seen."""
        tot = self.counts.sum(axis=-1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            p = self.counts / tot
            ent = -np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0).sum(axis=-1)
        return np.where(tot[..., 0] > 0, ent, np.nan)

    def task_entropy(self) -> np.ndarray:
        """Per-task entropy averaged over layers."""
        return self.layer_entropy().mean(axis=0)

    def top_expert_agreement(self) -> float:
        """Fraction of (layer, task pair) cases where two seen tasks share their top expert."""
        agree = total = 0
        for layer in self.counts:
            seen = np.flatnonzero(layer.sum(axis=1) > 0)
            top = layer[seen].argmax(axis=1)
            for a in range(len(seen)):
                for b in range(a + 1, len(seen)):
                    agree += int(top[a] == top[b])
                    total += 1
        return agree / total if total else float("nan")

    def merge(self, other: "RoutingStats") -> "RoutingStats":
        return RoutingStats(self.counts + other.counts, self.tokens + other.tokens)

    def to_dict(self) -> dict:
        util = self.counts.sum(axis=0)
        with np.errstate(invalid="ignore"):
            frac = util / util.sum(axis=1, keepdims=True)
        ent = self.task_entropy()
        seen = self.tokens.sum(axis=0) > 0
        n_e = self.counts.shape[-1]
        return {
            "n_experts": int(n_e),
            "max_entropy": float(np.log(n_e)) if n_e else 0.0,
            "per_layer_counts": self.counts.astype(int).tolist(),
            "per_expert_totals": self.expert_totals.astype(int).tolist(),
            "per_task": {
                str(t): {"utilization": frac[t].tolist(), "entropy": float(ent[t])}
                for t in np.flatnonzero(seen)
            },
            "top_expert_agreement": self.top_expert_agreement(),
        }


def collect_routing_stats(gates: list[np.ndarray], y: np.ndarray, n_tasks: int) -> RoutingStats:
    """Count nonzero gates per (layer, task, expert) from per-layer (b, n, N_e) gates."""
    y = np.asarray(y)
    n_e = gates[0].shape[-1]
    counts = np.zeros((len(gates), n_tasks, n_e))
    tokens = np.zeros((len(gates), n_tasks))
    for li, g in enumerate(gates):
        per_sample = (g != 0).sum(axis=1)  # (b, N_e)
        np.add.at(counts[li], y, per_sample)
        np.add.at(tokens[li], y, g.shape[1])
    return RoutingStats(counts, tokens)
