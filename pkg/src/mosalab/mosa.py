"""Mixture of Sparse Attention heads.

Each head scores every token with a sigmoid router, keeps its top-k tokens
(expert-choice routing, so every head processes exactly k tokens), runs
causal attention among them using their original positions, scales each
output row by its router score and scatters the rows back into a zero
``[T, h]`` array. A layer is the plain sum of its heads.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import HeadWeights, _normal, attention
from .rope import RopeParams, rope_apply
from .tensor import (
    SENTINEL, Tensor, add_n, gather_rows, matmul, mul, reshape, scatter_rows,
    sigmoid, take_last, topk_indices,
)


@dataclass
class MosaHeadWeights(HeadWeights):
    wr: Tensor  # router vector, length h

    def parameters(self) -> dict[str, Tensor]:
        return {**super().parameters(), "wr": self.wr}


def init_mosa_head(rng: np.random.Generator, hidden: int, head_dim: int, dtype=np.float64) -> MosaHeadWeights:
    std = 1.0 / math.sqrt(hidden)
    shapes = [(hidden, head_dim)] * 3 + [(head_dim, hidden), (hidden,)]
    return MosaHeadWeights(*(_normal(rng, s, std, dtype) for s in shapes))


@dataclass
class Selection:
    indices: np.ndarray  # [..., k], strictly ascending original positions
    scores: Tensor       # [..., k], router outputs at those positions

    @property
    def k(self) -> int:
        return self.indices.shape[-1]


def route_scores(X: Tensor, wr: Tensor) -> Tensor:
    """sigmoid(X @ wr), one score per token: ``[..., T, h] -> [..., T]``."""
    logits = matmul(X, reshape(wr, (wr.shape[0], 1)))
    return reshape(sigmoid(logits), X.shape[:-1])


def select(scores: Tensor, k: int, include_first: bool = False) -> Selection:
    """Top-k tokens by score; with ``include_first`` position 0 is always kept
    and the remaining k-1 slots go to the best of positions 1..T-1."""
    T = scores.shape[-1]
    if not 1 <= k <= T:
        raise ValueError(f"select: k={k} outside [1, T={T}]; clamp with adaptive_k first")
    rank = scores.data
    if include_first:
        rank = rank.copy()
        rank[..., 0] = np.inf
    idx = topk_indices(rank, k)
    return Selection(idx, take_last(scores, idx))


def selection_mask(indices) -> Tensor:
    """Causal mask over original positions: entry (i, j) allowed iff I[i] >= I[j]."""
    I = np.asarray(indices)
    return Tensor(np.where(I[..., :, None] >= I[..., None, :], 0.0, SENTINEL))


def sparse_attend(X: Tensor, w: HeadWeights, indices, scores: Tensor | None,
                  rope: RopeParams | None = None) -> Tensor:
    """Attention restricted to rows ``indices`` of X, scattered back to length T.

    ``scores`` (shape ``[..., k]``) scales each attended row before the output
    projection; ``None`` means unit scores and skips the product entirely.
    """
    T = X.shape[-2]
    idx = np.asarray(indices, dtype=np.int64)
    Xs = gather_rows(X, idx)
    q, k, v = matmul(Xs, w.wq), matmul(Xs, w.wk), matmul(Xs, w.wv)
    if rope is not None:
        q, k = rope_apply(q, idx, rope), rope_apply(k, idx, rope)
    A = attention(q, k, v, selection_mask(idx))
    if scores is not None:
        A = mul(A, reshape(scores, scores.shape + (1,)))
    return scatter_rows(matmul(A, w.wo), idx, T)


def mosa_head(X: Tensor, w: MosaHeadWeights, k: int, include_first: bool = False,
              rope: RopeParams | None = None, *, indices=None, unit_scores: bool = False,
              return_selection: bool = False):
    """One MoSA head on ``X`` of shape ``[..., T, h]``.

    ``indices`` forces the selection (the router still supplies the scaling
    scores unless ``unit_scores``); both are verification hooks.
    """
    T = X.shape[-2]
    if T == 0:
        raise ValueError("mosa_head on an empty sequence")
    if indices is None:
        r = route_scores(X, w.wr)
        sel = select(r, k, include_first)
    else:
        idx = np.asarray(indices, dtype=np.int64)
        if idx.ndim < X.ndim - 1:
            idx = np.broadcast_to(idx, X.shape[:-2] + idx.shape[-1:])
        r = None if unit_scores else route_scores(X, w.wr)
        sel = Selection(idx, take_last(r, idx) if r is not None else Tensor(np.ones(idx.shape)))
    Y = sparse_attend(X, w, sel.indices, None if unit_scores else sel.scores, rope)
    return (Y, sel) if return_selection else Y


def mosa_layer(X: Tensor, heads: list[MosaHeadWeights], k: int, include_first: bool = False,
               rope: RopeParams | None = None) -> Tensor:
    return add_n([mosa_head(X, w, k, include_first, rope) for w in heads])


def adaptive_k(T: int, rho: float) -> int:
    """Tokens per head for a length-T input: max(floor(T / rho), 2), never above T."""
    if T < 1 or rho < 1:
        raise ValueError(f"adaptive_k needs T >= 1 and rho >= 1, got T={T}, rho={rho}")
    return min(max(int(T // rho), 2), T)
