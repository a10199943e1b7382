"""Adaptive moment estimation with state kept on the float32 grid.

Parameters and both moment buffers are rounded to the nearest float32 after
every update, so a float32 checkpoint captures the full training state and a
resumed run continues bit-identically.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dit import to_f32_grid


@dataclass
class Adam:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def update(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        """In-place update of every tensor in ``params`` (all must have a gradient)."""
        self.step += 1
        c1 = 1.0 - self.beta1 ** self.step
        c2 = 1.0 - self.beta2 ** self.step
        for name, p in params.items():
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            to_f32_grid(m)
            to_f32_grid(v)
            if lr:
                p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
                to_f32_grid(p)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": a for k, a in self.m.items()}
        out.update({f"adam.v.{k}": a for k, a in self.v.items()})
        return out

    def load_tensors(self, tensors: dict[str, np.ndarray], step: int) -> None:
        self.step = step
        self.m = {k[len("adam.m."):]: a.copy() for k, a in tensors.items() if k.startswith("adam.m.")}
        self.v = {k[len("adam.v."):]: a.copy() for k, a in tensors.items() if k.startswith("adam.v.")}
