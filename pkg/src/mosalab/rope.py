"""Rotary position encodings keyed by original token positions."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, make_op


@dataclass(frozen=True)
class RopeParams:
    head_dim: int
    base: float = 10000.0

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 2:
            raise ValueError(f"RoPE head_dim must be a positive even number, got {self.head_dim}")

    @property
    def n_pairs(self) -> int:
        # pairs (0,1), (2,3), ... inside the first half of the head dimensions
        return self.head_dim // 4

    def frequencies(self) -> np.ndarray:
        half = self.head_dim // 2
        d = np.arange(self.n_pairs, dtype=np.float64)
        return self.base ** (-2.0 * d / half)


def rope_angles(positions, params: RopeParams) -> tuple[np.ndarray, np.ndarray]:
    pos = np.asarray(positions, dtype=np.float64)
    ang = pos[..., None] * params.frequencies()
    return np.cos(ang), np.sin(ang)


def rope_apply(x: Tensor, positions, params: RopeParams) -> Tensor:
    """Rotate the first half of the last axis of ``x`` by position-dependent angles.

    ``positions`` has shape ``[..., k]`` matching ``x``'s ``[..., k, h']`` and
    holds each row's position in the full sequence, so a gathered subset is
    rotated exactly as it would have been in place.
    """
    if x.shape[-1] != params.head_dim:
        raise ValueError(f"rope_apply: last axis {x.shape[-1]} != head_dim {params.head_dim}")
    P = params.n_pairs
    cos, sin = rope_angles(positions, params)
    cos = cos.astype(x.dtype, copy=False)
    sin = sin.astype(x.dtype, copy=False)
    z = x.data
    xe, xo = z[..., 0:2 * P:2], z[..., 1:2 * P:2]
    out = z.copy()
    out[..., 0:2 * P:2] = xe * cos - xo * sin
    out[..., 1:2 * P:2] = xe * sin + xo * cos

    def backward(g):
        gx = g.copy()
        ge, go = g[..., 0:2 * P:2], g[..., 1:2 * P:2]
        gx[..., 0:2 * P:2] = ge * cos + go * sin
        gx[..., 1:2 * P:2] = go * cos - ge * sin
        return (gx,)

    return make_op(out, (x,), backward)
