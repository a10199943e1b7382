"""Task-aware InfoNCE over flattened, L2-normalised hidden states.

Positives are the other in-batch samples with the same task label; the
denominator runs over every sample including the anchor itself. Anchors with
no positive are dropped from the average (``active`` counts the rest).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import ConsistencyError, LabelError, ParameterError, ShardError

METRICS = ("sqeuclidean", "cosine")


@dataclass
class HiddenBatch:
    h: np.ndarray  # (b, n, d)
    y: np.ndarray  # (b,)
    layer: int = 0

    def __post_init__(self):
        self.y = np.asarray(self.y)
        if self.h.shape[0] < 1 or self.y.shape != (self.h.shape[0],):
            raise LabelError(f"need one label per sample: h {self.h.shape}, y {self.y.shape}")


def flatten_normalize_fwd(h: np.ndarray):
    return nx.l2_normalize_fwd(h.reshape(h.shape[0], -1))


def flatten_normalize(hb: HiddenBatch | np.ndarray) -> np.ndarray:
    h = hb.h if isinstance(hb, HiddenBatch) else hb
    return flatten_normalize_fwd(h)[0]


def cross_distance(za: np.ndarray, zb: np.ndarray, metric: str = "sqeuclidean") -> np.ndarray:
    """Distances between unit rows: ``2 - 2 a.b`` clamped to [0, 4], or ``1 - a.b`` in [0, 2]."""
    gram = za @ zb.T
    if metric == "sqeuclidean":
        return np.clip(2.0 - 2.0 * gram, 0.0, 4.0)
    if metric == "cosine":
        return np.clip(1.0 - gram, 0.0, 2.0)
    raise ParameterError(f"unknown metric {metric!r}; expected one of {METRICS}")


def pairwise_distance(z: np.ndarray, metric: str = "sqeuclidean") -> np.ndarray:
    d = cross_distance(z, z, metric)
    np.fill_diagonal(d, 0.0)
    return d


def pairwise_sq_dist(z: np.ndarray) -> np.ndarray:
    return pairwise_distance(z, "sqeuclidean")


def _dist_row_grad(z_rows: np.ndarray, z_all: np.ndarray, dd_rows: np.ndarray, metric: str):
    """d/dz_i of sum_j dd_ij * dist(z_i, z_j) for the given anchor rows (z_all const)."""
    coef = -2.0 if metric == "sqeuclidean" else -1.0
    return coef * (dd_rows @ z_all)


def build_task_mask(y: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """M_ij = 1 iff y_i == y_j and i != j; also returns per-row positive counts."""
    y = np.asarray(y)
    m = (y[:, None] == y[None, :]).astype(np.float64)
    np.fill_diagonal(m, 0.0)
    return m, m.sum(axis=1).astype(int)


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")


def _row_terms(d_rows: np.ndarray, m_rows: np.ndarray, tau: float, self_cols: np.ndarray | None):
    """Per-anchor losses and dloss/dD for anchor rows against all columns.

    ``self_cols[r]`` is the column of anchor r, excluded from the denominator
    when given.
    """
    logits = -d_rows / tau
    pos = m_rows > 0
    keep = np.ones_like(pos)
    if self_cols is not None:
        keep[np.arange(len(self_cols)), self_cols] = False
    log_num = nx.logsumexp(logits, axis=1, where=pos)
    log_den = nx.logsumexp(logits, axis=1, where=keep)
    active = pos.any(axis=1)
    losses = np.where(active, log_den - np.where(active, log_num, 0.0), np.nan)
    e = np.exp(logits - log_den[:, None]) * keep
    p = np.where(pos, np.exp(logits - np.where(active, log_num, 0.0)[:, None]), 0.0)
    grad = np.where(active[:, None], (p - e) / tau, 0.0)
    return losses, active, grad


def task_infonce(d: np.ndarray, m: np.ndarray, tau: float = 0.5,
                 exclude_self: bool = False) -> tuple[float, int]:
    """Mean InfoNCE over anchors with at least one positive; (0.0, 0) if none."""
    _check_tau(tau)
    b = d.shape[0]
    self_cols = np.arange(b) if exclude_self else None
    losses, active, _ = _row_terms(d, m, tau, self_cols)
    n = int(active.sum())
    return (float(np.nansum(losses) / n) if n else 0.0), n


def per_sample_infonce(d, m, tau=0.5, exclude_self=False) -> np.ndarray:
    """Anchor losses, NaN where the anchor has no positive."""
    _check_tau(tau)
    self_cols = np.arange(d.shape[0]) if exclude_self else None
    return _row_terms(d, m, tau, self_cols)[0]


def task_infonce_grad(h: np.ndarray, y: Sequence[int], tau: float = 0.5, metric: str = "sqeuclidean",
                      exclude_self: bool = False) -> tuple[float, int, np.ndarray]:
    """Loss, active count and gradient w.r.t. raw hidden states ``h`` (b, ...)."""
    _check_tau(tau)
    z, norms = flatten_normalize_fwd(h)
    d = pairwise_distance(z, metric)
    m, _ = build_task_mask(y)
    b = len(z)
    losses, active, gd = _row_terms(d, m, tau, np.arange(b) if exclude_self else None)
    n = int(active.sum())
    if n == 0:
        return 0.0, 0, np.zeros_like(h)
    gd = gd / n
    sym = gd + gd.T
    np.fill_diagonal(sym, 0.0)
    sym = np.where(_clamped(z, metric), 0.0, sym)
    dz = _dist_row_grad(z, z, sym, metric)
    dh = nx.l2_normalize_vjp(z, norms, dz).reshape(h.shape)
    return float(np.nansum(losses) / n), n, dh


def _clamped(z: np.ndarray, metric: str) -> np.ndarray:
    gram = z @ z.T
    raw = 2.0 - 2.0 * gram if metric == "sqeuclidean" else 1.0 - gram
    hi = 4.0 if metric == "sqeuclidean" else 2.0
    return (raw < 0.0) | (raw > hi)


# --------------------------------------------------------------------------
# simulated multi-worker gather


@dataclass
class ShardedBatch:
    shards: list[HiddenBatch]

    def __post_init__(self):
        if not self.shards or any(s.h.shape[0] == 0 for s in self.shards):
            raise ShardError("every worker needs at least one sample")

    @property
    def workers(self) -> int:
        return len(self.shards)

    @property
    def y(self) -> np.ndarray:
        return np.concatenate([s.y for s in self.shards])

    @property
    def bounds(self) -> list[tuple[int, int]]:
        out, start = [], 0
        for s in self.shards:
            out.append((start, start + s.h.shape[0]))
            start += s.h.shape[0]
        return out

    @classmethod
    def split(cls, hb: HiddenBatch, workers: int) -> "ShardedBatch":
        """Contiguous, near-equal split of a global batch."""
        b = hb.h.shape[0]
        if workers < 1 or workers > b:
            raise ShardError(f"cannot split {b} samples over {workers} workers")
        edges = np.linspace(0, b, workers + 1).round().astype(int)
        return cls([HiddenBatch(hb.h[a:e], hb.y[a:e], hb.layer) for a, e in zip(edges[:-1], edges[1:])])


@dataclass
class WorkerResult:
    loss: float  # mean over local active anchors (0 when none)
    active: int
    grad: np.ndarray  # w.r.t. the gathered global batch; remote rows are exactly zero


def _gather(sb: ShardedBatch):
    parts = [flatten_normalize_fwd(s.h) for s in sb.shards]
    z_all = np.concatenate([p[0] for p in parts])
    return parts, z_all


def sharded_task_infonce(sb: ShardedBatch, tau: float = 0.5, metric: str = "sqeuclidean",
                         exclude_self: bool = False, with_grad: bool = False):
    """Each worker scores its local anchors against the gathered global set.

    Returns (total, per-worker losses) or, with ``with_grad``, (total,
    list of WorkerResult). Worker gradients differentiate the global objective
    with respect to that worker's rows only; gathered remote rows are
    constants. Summing worker gradients gives the single-device gradient.
    """
    _check_tau(tau)
    y = sb.y
    m_all, _ = build_task_mask(y)
    parts, z_all = _gather(sb)
    const = z_all.copy()  # the gathered set, as received from other workers
    d_all = pairwise_distance(const, metric)
    b = len(z_all)
    results: list[WorkerResult] = []
    local_terms = []
    for (lo, hi), (z_loc, norms) in zip(sb.bounds, parts):
        # forward: local anchors vs gathered A
        d_loc = cross_distance(z_loc, const, metric)
        d_loc[np.arange(hi - lo), np.arange(lo, hi)] = 0.0
        self_cols = np.arange(lo, hi) if exclude_self else None
        losses, active, _ = _row_terms(d_loc, m_all[lo:hi], tau, self_cols)
        n_loc = int(active.sum())
        local_terms.append((losses, n_loc))
        results.append(WorkerResult(float(np.nansum(losses) / n_loc) if n_loc else 0.0, n_loc, None))
    n_total = sum(n for _, n in local_terms)
    total = float(sum(np.nansum(l) for l, _ in local_terms) / n_total) if n_total else 0.0
    if not with_grad:
        return total, [r.loss for r in results]
    # backward: key-side terms of every anchor come from the gathered constants
    _, _, g_all = _row_terms(d_all, m_all, tau, np.arange(b) if exclude_self else None)
    clamped = _clamped(const, metric)
    for r, (lo, hi), (z_loc, norms) in zip(results, sb.bounds, parts):
        grad = np.zeros((b,) + sb.shards[0].h.shape[1:])
        if n_total:
            sym = (g_all[lo:hi] + g_all[:, lo:hi].T) / n_total
            sym[np.arange(hi - lo), np.arange(lo, hi)] = 0.0
            sym = np.where(clamped[lo:hi], 0.0, sym)
            dz = _dist_row_grad(z_loc, const, sym, metric)
            grad[lo:hi] = nx.l2_normalize_vjp(z_loc, norms, dz).reshape((hi - lo,) + grad.shape[1:])
        r.grad = grad
    return total, results


# --------------------------------------------------------------------------
# all-layer reduction


def _select(hidden: list[HiddenBatch], layers) -> list[HiddenBatch]:
    if layers in (None, "all"):
        return list(hidden)
    return [hidden[i] for i in layers]


def _check_layers(hidden: list[HiddenBatch]) -> None:
    if not hidden:
        raise ConsistencyError("no hidden layers given")
    y0 = hidden[0].y
    for hb in hidden[1:]:
        if hb.y.shape != y0.shape or np.any(hb.y != y0):
            raise ConsistencyError(f"layer {hb.layer} labels differ from layer {hidden[0].layer}")


def multi_layer_task_loss(hidden: list[HiddenBatch], tau: float = 0.5, *, metric: str = "sqeuclidean",
                          layers="all", reduction: str = "mean", exclude_self: bool = False) -> float:
    return multi_layer_task_loss_grad(hidden, tau, metric=metric, layers=layers, reduction=reduction,
                                      exclude_self=exclude_self, with_grad=False)[0]


def multi_layer_task_loss_grad(hidden: list[HiddenBatch], tau: float = 0.5, *, metric: str = "sqeuclidean",
                               layers="all", reduction: str = "mean", exclude_self: bool = False,
                               workers: int = 1, with_grad: bool = True):
    """Mean (or sum) of per-layer task losses.

    Returns (loss, {layer index: dL/dh}). Layers without any active anchor
    contribute zero but still count toward the mean.
    """
    _check_layers(hidden)
    chosen = _select(hidden, layers)
    if reduction not in ("mean", "sum"):
        raise ParameterError(f"reduction must be 'mean' or 'sum', got {reduction!r}")
    w = 1.0 / len(chosen) if reduction == "mean" else 1.0
    total = 0.0
    grads: dict[int, np.ndarray] = {}
    for hb in chosen:
        if workers > 1:
            sb = ShardedBatch.split(hb, workers)
            if with_grad:
                loss, res = sharded_task_infonce(sb, tau, metric, exclude_self, with_grad=True)
                g = res[0].grad
                for r in res[1:]:
                    g = g + r.grad
            else:
                loss, _ = sharded_task_infonce(sb, tau, metric, exclude_self)
        elif with_grad:
            loss, _, g = task_infonce_grad(hb.h, hb.y, tau, metric, exclude_self)
        else:
            z = flatten_normalize(hb)
            loss, _ = task_infonce(pairwise_distance(z, metric), build_task_mask(hb.y)[0], tau, exclude_self)
        total += w * loss
        if with_grad:
            grads[hb.layer] = grads.get(hb.layer, 0.0) + w * g
    return total, grads


def separability_ratio(h: np.ndarray, y: Sequence[int]) -> float | None:
    """Mean intra-task / mean inter-task squared distance of normalised rows."""
    y = np.asarray(y)
    d = pairwise_sq_dist(flatten_normalize(h))
    same = y[:, None] == y[None, :]
    off = ~np.eye(len(y), dtype=bool)
    intra, inter = same & off, ~same
    if not intra.any() or not inter.any():
        return None
    mean_inter = d[inter].mean()
    if mean_inter == 0:
        return None
    return float(d[intra].mean() / mean_inter)
