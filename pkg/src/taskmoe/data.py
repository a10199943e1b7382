"""Synthetic multi-task editing data and the category-balanced task sampler.

Each task maps a reference token grid ``src`` (n tokens laid out as rows x
grid_width, d_in channels) to an edited target ``x0``. The fourteen task
specs cover seven transform kinds twice with different parameters; the last
id of the task table (14 by default) is the reserved "other" task, which has
an embedding but no generator.
"""
from __future__ import annotations

import zlib
from collections import deque
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .dit import FlowBatch
from .errors import SpecError

KINDS = ("negate", "swap", "flip", "shift", "scale", "pattern", "smooth")
# transforms that are projections (applying twice equals applying once); all others are invertible
IDEMPOTENT = frozenset({"smooth"})


@dataclass(frozen=True)
class SyntheticTaskSpec:
    task_id: int
    kind: str
    params: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpecError(f"unknown transform kind {self.kind!r}; expected one of {KINDS}")

    @property
    def invertible(self) -> bool:
        return self.kind not in IDEMPOTENT

    def apply(self, src: np.ndarray, grid_width: int) -> np.ndarray:
        """Transform a (n, d_in) or (b, n, d_in) token array."""
        x = np.asarray(src, dtype=np.float64)
        single = x.ndim == 2
        if single:
            x = x[None]
        b, n, d = x.shape
        if n % grid_width:
            raise SpecError(f"token count {n} does not fill a grid of width {grid_width}")
        p = self.params
        if self.kind == "negate":
            out = x.copy()
            out[..., list(p["channels"])] *= -1.0
        elif self.kind == "swap":
            i, j = p["channels"]
            out = x.copy()
            out[..., [i, j]] = x[..., [j, i]]
        elif self.kind == "flip":
            out = x.reshape(b, n // grid_width, grid_width, d)[:, :, ::-1].reshape(b, n, d)
        elif self.kind == "shift":
            out = np.roll(x, int(p["tokens"]), axis=1)
        elif self.kind == "scale":
            out = float(p["factor"]) * x
        elif self.kind == "pattern":
            out = x + _pattern(n, d, float(p["amplitude"]), int(p["freq"]))
        else:  # smooth: ideal low-pass on the token grid keeps |k| <= cutoff per axis
            rows = n // grid_width
            grid = x.reshape(b, rows, grid_width, d)
            spec = np.fft.fft2(grid, axes=(1, 2))
            keep = (_freq_mask(rows, int(p["cutoff"]))[:, None]
                    & _freq_mask(grid_width, int(p["cutoff"]))[None, :])
            out = np.fft.ifft2(spec * keep[None, :, :, None], axes=(1, 2)).real.reshape(b, n, d)
        return out[0] if single else out


def _freq_mask(n: int, cutoff: int) -> np.ndarray:
    k = np.fft.fftfreq(n, 1.0 / n)
    return np.abs(k) <= cutoff


def _pattern(n: int, d: int, amplitude: float, freq: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    ch = np.arange(d)[None, :]
    return amplitude * np.sin(2 * np.pi * freq * pos / n + ch)


def default_task_specs() -> list[SyntheticTaskSpec]:
    """Fourteen tasks; ids 0-6 use each kind once, 7-13 repeat the kinds with other parameters."""
    first = [
        SyntheticTaskSpec(0, "negate", {"channels": (0, 1)}),
        SyntheticTaskSpec(1, "swap", {"channels": (0, 2)}),
        SyntheticTaskSpec(2, "flip"),
        SyntheticTaskSpec(3, "shift", {"tokens": 5}),
        SyntheticTaskSpec(4, "scale", {"factor": 0.5}),
        SyntheticTaskSpec(5, "pattern", {"amplitude": 1.0, "freq": 1}),
        SyntheticTaskSpec(6, "smooth", {"cutoff": 1}),
    ]
    second = [
        SyntheticTaskSpec(7, "negate", {"channels": (2, 3)}),
        SyntheticTaskSpec(8, "swap", {"channels": (1, 3)}),
        SyntheticTaskSpec(9, "flip"),  # same map as task 2: a synonym pair
        SyntheticTaskSpec(10, "shift", {"tokens": -3}),
        SyntheticTaskSpec(11, "scale", {"factor": -1.5}),
        SyntheticTaskSpec(12, "pattern", {"amplitude": 0.7, "freq": 3}),
        SyntheticTaskSpec(13, "smooth", {"cutoff": 0}),
    ]
    return first + second


def task_specs(n: int) -> list[SyntheticTaskSpec]:
    specs = default_task_specs()
    if not 1 <= n <= len(specs):
        raise SpecError(f"need between 1 and {len(specs)} data tasks, got {n}")
    return specs[:n]


# --------------------------------------------------------------------------
# balanced sampler


@dataclass
class SamplerState:
    """Sliding cache of the most recent draws over a universe of ``n_tasks`` indices."""

    n_tasks: int
    capacity: int = 1024
    cache: deque = field(default_factory=deque)

    def __post_init__(self):
        if self.n_tasks < 1:
            raise SpecError("task universe must be non-empty")
        if self.capacity < 1:
            raise SpecError("cache capacity must be >= 1")
        self.cache = deque((int(t) for t in self.cache), maxlen=self.capacity)
        if any(not 0 <= t < self.n_tasks for t in self.cache):
            raise SpecError("cache holds a task index outside the universe")
        self._counts = np.bincount(np.fromiter(self.cache, dtype=np.int64, count=len(self.cache)),
                                   minlength=self.n_tasks)

    @property
    def counts(self) -> np.ndarray:
        return self._counts.copy()

    def probabilities(self) -> np.ndarray:
        w = 1.0 / (self._counts + 1.0)
        return w / w.sum()

    def push(self, t: int) -> None:
        t = int(t)
        if len(self.cache) == self.capacity:
            self._counts[self.cache[0]] -= 1
        self.cache.append(t)
        self._counts[t] += 1

    def to_dict(self) -> dict:
        return {"n_tasks": self.n_tasks, "capacity": self.capacity, "cache": list(self.cache)}

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerState":
        return cls(int(d["n_tasks"]), int(d["capacity"]), deque(d["cache"]))


def balanced_sample(sampler: SamplerState, rng: np.random.Generator) -> int:
    """Draw a task index with probability proportional to 1 / (cache count + 1), then cache it."""
    cdf = np.cumsum(sampler.probabilities())
    t = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    t = min(t, sampler.n_tasks - 1)
    sampler.push(t)
    return t


# --------------------------------------------------------------------------
# batches


def stream(seed: int, name: str, *key: int) -> np.random.Generator:
    """Independent generator for a named sub-stream (optionally indexed, e.g. by step)."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(zlib.crc32(name.encode()), *key)))


def make_sources(rng: np.random.Generator, b: int, n: int, d_in: int) -> np.ndarray:
    """Gaussian token fields: white noise plus a per-sample channel offset."""
    return rng.standard_normal((b, n, d_in)) + 0.5 * rng.standard_normal((b, 1, d_in))


def make_synthetic_batch(specs: Sequence[SyntheticTaskSpec], sampler: SamplerState, b: int,
                         rng: np.random.Generator | int, *, grid_width: int = 4, n_tokens: int = 16,
                         d_in: int = 4, noise_rng: np.random.Generator | None = None,
                         sampler_rng: np.random.Generator | None = None) -> FlowBatch:
    """Draw ``b`` tasks through the balanced sampler and build their flow samples.

    Sampler indices address ``specs`` positionally; labels are the specs'
    task ids. Noise and timesteps come from ``noise_rng`` (default ``rng``).
    """
    if b < 1:
        raise SpecError(f"batch size must be >= 1, got {b}")
    if sampler.n_tasks != len(specs):
        raise SpecError(f"sampler covers {sampler.n_tasks} tasks but {len(specs)} specs were given")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    noise_rng = noise_rng or rng
    sampler_rng = sampler_rng or rng
    idx = [balanced_sample(sampler, sampler_rng) for _ in range(b)]
    src = make_sources(rng, b, n_tokens, d_in)
    x0 = np.empty_like(src)
    for i, k in enumerate(idx):
        x0[i] = specs[k].apply(src[i], grid_width)
    eps = noise_rng.standard_normal(x0.shape)
    t = noise_rng.uniform(0.0, 1.0, b)
    y = np.array([specs[k].task_id for k in idx], dtype=np.int64)
    return FlowBatch(x0, src, eps, t, y)


def make_task_batch(spec: SyntheticTaskSpec, b: int, rng: np.random.Generator, *, grid_width: int = 4,
                    n_tokens: int = 16, d_in: int = 4) -> FlowBatch:
    """``b`` samples of a single task (no sampler involved)."""
    src = make_sources(rng, b, n_tokens, d_in)
    x0 = spec.apply(src, grid_width)
    eps = rng.standard_normal(x0.shape)
    t = rng.uniform(0.0, 1.0, b)
    return FlowBatch(x0, src, eps, t, np.full(b, spec.task_id, dtype=np.int64))


def make_validation_set(specs: Sequence[SyntheticTaskSpec], per_task: int, seed: int, *, grid_width: int = 4,
                        n_tokens: int = 16, d_in: int = 4) -> FlowBatch:
    """``per_task`` held-out samples per task with fixed noise and timesteps, task-major order."""
    parts = [make_task_batch(s, per_task, stream(seed, "val", s.task_id), grid_width=grid_width,
                             n_tokens=n_tokens, d_in=d_in) for s in specs]
    return FlowBatch(*(np.concatenate([getattr(p, f) for p in parts])
                       for f in ("x0", "src", "eps", "t", "y")))


def lookup_spec(specs: Sequence[SyntheticTaskSpec], task_id: int) -> SyntheticTaskSpec:
    for s in specs:
        if s.task_id == task_id:
            return s
    raise SpecError(f"no generator for task id {task_id}")
