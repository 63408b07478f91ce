"""Adam with bias correction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def to_arrays(self) -> dict:
        out = {}
        for k in self.m:
            out[f"adam.m/{k}"] = self.m[k]
            out[f"adam.v/{k}"] = self.v[k]
        return out


def adam_step(params, state: AdamState, clip_norm: float | None = None) -> None:
    """Update ``params`` in place from their ``grad`` and zero the grads.

    With ``clip_norm`` set, the global gradient norm is rescaled first.
    """
    params = list(params)
    scale = 1.0
    if clip_norm is not None:
        total = np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params))
        if total > clip_norm:
            scale = clip_norm / total
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p in params:
        g = p.grad if scale == 1.0 else p.grad * np.float32(scale)
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)
        p.zero_grad()
