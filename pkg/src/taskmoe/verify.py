"""Self-contained verification suites for the task-contrastive loss.

The oracle is a scalar, loop-by-loop evaluation written independently of the
vectorised implementation (compensated sums, explicit max shift).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import contrastive as C
from .errors import ParameterError


@dataclass
class Check:
    name: str
    worst: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance

    def __str__(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name:34s} worst={self.worst:.3e} tol={self.tolerance:.0e}"

    def to_dict(self) -> dict:
        return {"name": self.name, "worst": self.worst, "tolerance": self.tolerance, "passed": self.passed}


def oracle_infonce(h: np.ndarray, y, tau: float) -> float:
    """Mean over anchors with a positive of -log(sum_pos exp(-D/tau) / sum_all exp(-D/tau))."""
    rows = [list(map(float, r)) for r in h.reshape(len(h), -1)]
    z = []
    for r in rows:
        n = math.sqrt(math.fsum(v * v for v in r))
        z.append([v / n for v in r])
    b = len(z)
    losses = []
    for i in range(b):
        logits = []
        pos = []
        for j in range(b):
            dot = math.fsum(a * c for a, c in zip(z[i], z[j]))
            d = 0.0 if i == j else min(4.0, max(0.0, 2.0 - 2.0 * dot))
            logits.append(-d / tau)
            if j != i and y[j] == y[i]:
                pos.append(-d / tau)
        if not pos:
            continue
        m = max(logits)
        log_all = m + math.log(math.fsum(math.exp(v - m) for v in logits))
        mp = max(pos)
        log_pos = mp + math.log(math.fsum(math.exp(v - mp) for v in pos))
        losses.append(log_all - log_pos)
    return math.fsum(losses) / len(losses) if losses else 0.0


def _random_problem(rng, b):
    h = rng.standard_normal((b, 3, 4))
    y = rng.integers(0, max(1, b // 2), b)
    return h, y


def verify_contrastive(batch_sizes=(2, 4, 8), workers=(1, 2, 4), tau: float = 0.5, trials: int = 50,
                       seed: int = 0) -> list[Check]:
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    if any(b < 1 for b in batch_sizes) or any(w < 1 for w in workers):
        raise ParameterError("batch sizes and worker counts must be >= 1")
    rng = np.random.default_rng(seed)
    checks = []

    # closed form: two identical unit rows of one task
    v = rng.standard_normal((1, 6))
    loss, _ = C.task_infonce(C.pairwise_distance(C.flatten_normalize(np.vstack([v, v]))),
                             C.build_task_mask([0, 0])[0], 0.5)
    checks.append(Check("closed_form_ln2[b=2,tau=0.5]", abs(loss - math.log(2)), 1e-12))

    for b in batch_sizes:
        worst = 0.0
        for _ in range(trials):
            h, y = _random_problem(rng, b)
            got, _ = C.task_infonce(C.pairwise_distance(C.flatten_normalize(h)), C.build_task_mask(y)[0], tau)
            ref = oracle_infonce(h, y, tau)
            worst = max(worst, abs(got - ref) / max(abs(ref), 1e-300) if ref else abs(got))
        checks.append(Check(f"oracle[b={b}]", worst, 1e-10))

    for b in batch_sizes:
        for w in workers:
            if w > b:
                continue
            worst_loss = worst_remote = 0.0
            for _ in range(trials):
                h, y = _random_problem(rng, b)
                single, _ = C.task_infonce(C.pairwise_distance(C.flatten_normalize(h)),
                                           C.build_task_mask(y)[0], tau)
                sb = C.ShardedBatch.split(C.HiddenBatch(h, y), w)
                total, results = C.sharded_task_infonce(sb, tau, with_grad=True)
                worst_loss = max(worst_loss, abs(total - single))
                for (lo, hi), r in zip(sb.bounds, results):
                    remote = np.concatenate([r.grad[:lo], r.grad[hi:]])
                    worst_remote = max(worst_remote, float(np.max(np.abs(remote), initial=0.0)))
            checks.append(Check(f"sharded_loss[b={b},W={w}]", worst_loss, 1e-9))
            checks.append(Check(f"sharded_remote_grad[b={b},W={w}]", worst_remote, 0.0))
    return checks
