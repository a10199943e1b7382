"""Dense float64 primitives, each paired with its vector-Jacobian product.

Forward functions return plain arrays; where the backward pass needs
intermediates, a ``*_fwd`` variant returns ``(out, cache)`` and the matching
``*_vjp`` consumes the cache.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DegenerateInputError, DimensionError, NumericalError

NORM_EPS = 1e-12
FD_STEP = 1e-5
REL_FLOOR = 1e-8


def _check_shape(cond: bool, msg: str) -> None:
    if not cond:
        raise DimensionError(msg)


# --------------------------------------------------------------------------
# matmul / linear


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a[..., k] @ b[k, p]``; leading dims of ``a`` are batch dims."""
    _check_shape(b.ndim == 2, f"matmul rhs must be 2-D, got {b.shape}")
    _check_shape(a.shape[-1] == b.shape[0], f"matmul inner dims differ: {a.shape} x {b.shape}")
    return a @ b


def matmul_vjp(a: np.ndarray, b: np.ndarray, dout: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    da = dout @ b.T
    db = a.reshape(-1, a.shape[-1]).T @ dout.reshape(-1, dout.shape[-1])
    return da, db


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    out = matmul(x, w)
    if b is not None:
        out = out + b
    return out


def linear_vjp(x, w, dout, has_bias: bool = True):
    dx, dw = matmul_vjp(x, w, dout)
    db = dout.reshape(-1, dout.shape[-1]).sum(axis=0) if has_bias else None
    return dx, dw, db


# --------------------------------------------------------------------------
# softmax / normalization


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_vjp(y: np.ndarray, dy: np.ndarray, axis: int = -1) -> np.ndarray:
    return y * (dy - (dy * y).sum(axis=axis, keepdims=True))


def logsumexp(x: np.ndarray, axis: int = -1, where: np.ndarray | None = None) -> np.ndarray:
    """Stable log-sum-exp; entries with ``where == False`` are excluded.

    Rows with no included entries give ``-inf``.
    """
    if where is None:
        m = x.max(axis=axis, keepdims=True)
        return (m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))).squeeze(axis)
    masked = np.where(where, x, -np.inf)
    m = masked.max(axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    s = np.where(where, np.exp(masked - m_safe), 0.0).sum(axis=axis, keepdims=True)
    with np.errstate(divide="ignore"):
        return (m_safe + np.log(s)).squeeze(axis)


def l2_normalize_fwd(x: np.ndarray, eps: float = NORM_EPS):
    _check_shape(x.ndim == 2, f"l2_normalize expects (b, m), got {x.shape}")
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    if np.any(norms < eps):
        bad = np.flatnonzero(norms[:, 0] < eps).tolist()
        raise DegenerateInputError(f"rows {bad} have norm below {eps}")
    y = x / norms
    return y, norms


def l2_normalize(x: np.ndarray, eps: float = NORM_EPS) -> np.ndarray:
    return l2_normalize_fwd(x, eps)[0]


def l2_normalize_vjp(y: np.ndarray, norms: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return (dy - y * (dy * y).sum(axis=1, keepdims=True)) / norms


def layer_norm_fwd(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, (xhat, rstd, gamma)


def layer_norm_vjp(cache, dout):
    xhat, rstd, gamma = cache
    flat = dout.reshape(-1, dout.shape[-1])
    dgamma = (flat * xhat.reshape(flat.shape)).sum(axis=0)
    dbeta = flat.sum(axis=0)
    dxhat = dout * gamma
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgamma, dbeta


# --------------------------------------------------------------------------
# activations

_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    """tanh-approximated GELU."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x ** 3)))


def gelu_vjp(x: np.ndarray, dout: np.ndarray) -> np.ndarray:
    u = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(u)
    du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dout * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du)


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def silu_vjp(x: np.ndarray, dout: np.ndarray) -> np.ndarray:
    s = 1.0 / (1.0 + np.exp(-x))
    return dout * s * (1.0 + x * (1.0 - s))


def sinusoidal_embedding(t: np.ndarray, width: int, max_period: float = 10000.0) -> np.ndarray:
    """(b,) times in [0, 1] -> (b, width) sin/cos features."""
    half = width // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = (1000.0 * np.asarray(t, dtype=np.float64))[:, None] * freqs[None, :]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=1)
    if width % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=1)
    return emb


# --------------------------------------------------------------------------
# attention


def attention_core_fwd(q: np.ndarray, k: np.ndarray, v: np.ndarray):
    """Full (non-causal) scaled dot-product attention over (b, H, n, dh)."""
    _check_shape(q.shape == k.shape == v.shape, f"q/k/v shapes differ: {q.shape} {k.shape} {v.shape}")
    _check_shape(q.ndim == 4 and q.shape[-1] >= 1, f"attention expects (b, H, n, dh), got {q.shape}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    p = softmax((q @ k.swapaxes(-1, -2)) * scale, axis=-1)
    return p @ v, (q, k, v, p, scale)


def attention_core(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    return attention_core_fwd(q, k, v)[0]


def attention_core_vjp(cache, dout: np.ndarray):
    q, k, v, p, scale = cache
    dv = p.swapaxes(-1, -2) @ dout
    dp = dout @ v.swapaxes(-1, -2)
    ds = softmax_vjp(p, dp, axis=-1) * scale
    dq = ds @ k
    dk = ds.swapaxes(-1, -2) @ q
    return dq, dk, dv


def split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, n, d = x.shape
    if d % n_heads:
        raise DimensionError(f"head count {n_heads} does not divide width {d}")
    return x.reshape(b, n, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


# --------------------------------------------------------------------------
# finite differences


@dataclass(frozen=True)
class GradCheckReport:
    op: str
    max_rel_error: float
    probes: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.op:<28s} max_rel_err={self.max_rel_error:.3e} "
                f"tol={self.tolerance:.0e} probes={self.probes}")


def rel_error(a: float, f: float) -> float:
    return abs(a - f) / max(REL_FLOOR, abs(a), abs(f))


def finite_diff_check(
    f: Callable[[np.ndarray], float],
    point: np.ndarray,
    grad: np.ndarray,
    probes: int = 50,
    tolerance: float = 1e-4,
    *,
    name: str = "op",
    rng: np.random.Generator | None = None,
    h: float = FD_STEP,
) -> GradCheckReport:
    """Compare ``grad`` against central differences of scalar ``f`` at ``point``.

    ``probes`` coordinates are drawn without replacement (all of them when the
    point is smaller). ``point`` is not modified.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != point.shape:
        raise DimensionError(f"gradient shape {grad.shape} != point shape {point.shape}")
    if not np.all(np.isfinite(grad)):
        raise NumericalError(f"{name}: analytic gradient is not finite")
    rng = rng if rng is not None else np.random.default_rng(0)
    n = point.size
    idx = rng.choice(n, size=min(probes, n), replace=False)
    x = np.array(point, dtype=np.float64, copy=True)
    flat = x.reshape(-1)
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        fd = (fp - fm) / (2 * h)
        if not np.isfinite(fd):
            raise NumericalError(f"{name}: non-finite finite difference at coordinate {i}")
        worst = max(worst, rel_error(float(grad.reshape(-1)[i]), fd))
    return GradCheckReport(name, worst, len(idx), tolerance)


# --------------------------------------------------------------------------
# registry of differentiable primitives, used by the property suite


def _normal(rng, shape):
    return rng.standard_normal(shape)


def _logits(rng, shape):
    return rng.uniform(-2.0, 2.0, shape)


def _ln_fwd(x, g, b):
    return layer_norm_fwd(x, g, b)[0]


def _ln_vjp(args, w):
    x, g, b = args
    return list(layer_norm_vjp(layer_norm_fwd(x, g, b)[1], w))


def _attn_vjp(args, w):
    return list(attention_core_vjp(attention_core_fwd(*args)[1], w))


def _l2_vjp(args, w):
    y, norms = l2_normalize_fwd(args[0])
    return [l2_normalize_vjp(y, norms, w)]


REGISTRY: dict[str, tuple] = {
    "matmul": (matmul, lambda args, w: list(matmul_vjp(*args, w)), [(4, 5), (5, 3)], _normal),
    "linear": (linear, lambda args, w: list(linear_vjp(args[0], args[1], w)),
               [(3, 4, 5), (5, 6), (6,)], _normal),
    "softmax": (softmax, lambda args, w: [softmax_vjp(softmax(args[0]), w)], [(3, 7)], _logits),
    "l2_normalize": (l2_normalize, _l2_vjp, [(4, 6)], _normal),
    "layer_norm": (_ln_fwd, _ln_vjp, [(2, 3, 8), (8,), (8,)], _normal),
    "gelu": (gelu, lambda args, w: [gelu_vjp(args[0], w)], [(4, 5)], _normal),
    "silu": (silu, lambda args, w: [silu_vjp(args[0], w)], [(4, 5)], _normal),
    "attention_core": (lambda q, k, v: attention_core(q, k, v), _attn_vjp,
                       [(1, 2, 5, 4)] * 3, _logits),
}


def check_registered(name: str, rng: np.random.Generator, probes: int = 10,
                     tolerance: float = 1e-4) -> GradCheckReport:
    """Check every argument of a registered primitive at one random point."""
    fwd, vjp, shapes, sampler = REGISTRY[name]
    args = [sampler(rng, s) for s in shapes]
    w = rng.standard_normal(np.shape(fwd(*args)))
    grads = vjp(args, w)
    worst = 0.0
    total = 0
    for pos, (arg, g) in enumerate(zip(args, grads)):
        def f(x, pos=pos):
            a = list(args)
            a[pos] = x
            return float((fwd(*a) * w).sum())
        rep = finite_diff_check(f, arg, g, probes, tolerance, name=name, rng=rng)
        worst = max(worst, rep.max_rel_error)
        total += rep.probes
    return GradCheckReport(name, worst, total, tolerance)
