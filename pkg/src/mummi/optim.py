from __future__ import annotations

from typing import Iterable

import numpy as np

from .diffmath import Tensor


def global_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))


class Adam:
    """Adam with optional global-norm gradient clipping.

    Parameters whose ``grad`` is None are skipped and keep their moment estimates.
    """

    def __init__(self, params: Iterable[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 clip_norm: float | None = 100.0, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.last_norm = 0.0
        self.last_clipped = False

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> float:
        """Apply one update and return the pre-clipping gradient norm."""
        norm = global_norm(self.params)
        if not np.isfinite(norm):
            raise FloatingPointError("non-finite gradient norm")
        scale = 1.0
        self.last_clipped = False
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
            self.last_clipped = True
        self.last_norm = norm
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad * scale
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {"t": np.array(self.t)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            state[f"m{i}"] = m.copy()
            state[f"v{i}"] = v.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["t"])
        for i in range(len(self.params)):
            m, v = np.asarray(state[f"m{i}"]), np.asarray(state[f"v{i}"])
            if m.shape != self.m[i].shape:
                raise ValueError(f"optimizer state shape mismatch at slot {i}")
            self.m[i][...] = m
            self.v[i][...] = v
