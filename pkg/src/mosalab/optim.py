"""Adam with linear warmup and global-norm gradient clipping."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig
from .tensor import Tensor


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``cfg.lr`` over ``cfg.warmup`` steps, constant afterwards."""
    return cfg.lr * min(1.0, step / cfg.warmup)


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads))


def clip_grads(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    norm = global_norm(grads)
    if norm > max_norm:
        factor = max_norm / norm
        grads = [g * factor for g in grads]
    return grads, norm


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              step: int, cfg: TrainConfig) -> dict[str, Tensor]:
    """One in-place Adam update (``step`` counts from 1). Clipping happens first."""
    names = list(params)
    clipped, _ = clip_grads([grads[n] for n in names], cfg.clip_norm)
    lr = lr_at(step, cfg)
    b1, b2 = cfg.betas
    c1, c2 = 1.0 - b1**step, 1.0 - b2**step
    for name, g in zip(names, clipped):
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)).astype(p.dtype, copy=False)
    return params
