"""Dense and sliding-window causal attention heads."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rope import RopeParams, rope_apply
from .tensor import SENTINEL, Tensor, add_n, masked_softmax_rows, matmul, scale, transpose


@dataclass
class HeadWeights:
    wq: Tensor  # h x h'
    wk: Tensor  # h x h'
    wv: Tensor  # h x h'
    wo: Tensor  # h' x h

    def parameters(self) -> dict[str, Tensor]:
        return {"wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo}

    @property
    def head_dim(self) -> int:
        return self.wq.shape[1]


def _normal(rng: np.random.Generator, shape, std: float, dtype) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


def init_head(rng: np.random.Generator, hidden: int, head_dim: int, dtype=np.float64) -> HeadWeights:
    std = 1.0 / math.sqrt(hidden)
    return HeadWeights(*(_normal(rng, s, std, dtype) for s in
                         [(hidden, head_dim)] * 3 + [(head_dim, hidden)]))


def causal_mask(T: int) -> Tensor:
    i = np.arange(T)
    return Tensor(np.where(i[:, None] >= i[None, :], 0.0, SENTINEL))


def local_mask(T: int, window: int) -> Tensor:
    """Causal band: row i sees j with ``0 <= i - j < window`` (itself included)."""
    if not 1 <= window:
        raise ValueError(f"local window must be >= 1, got {window}")
    i = np.arange(T)
    d = i[:, None] - i[None, :]
    return Tensor(np.where((d >= 0) & (d < window), 0.0, SENTINEL))


def attention(q: Tensor, k: Tensor, v: Tensor, mask) -> Tensor:
    """softmax((q k^T + mask) / sqrt(h')) v over the last two axes."""
    # 1/sqrt(h') is applied to q (k x h') rather than to the k x k scores; the
    # sentinel stays far below any real score either way
    scores = matmul(scale(q, 1.0 / math.sqrt(q.shape[-1])), transpose(k))
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    p = masked_softmax_rows(scores, m)
    return matmul(p, v)


def dense_head(X: Tensor, w: HeadWeights, mask, rope: RopeParams | None = None) -> Tensor:
    T = X.shape[-2]
    q, k, v = matmul(X, w.wq), matmul(X, w.wk), matmul(X, w.wv)
    if rope is not None:
        pos = np.arange(T)
        q, k = rope_apply(q, pos, rope), rope_apply(k, pos, rope)
    return matmul(attention(q, k, v, mask), w.wo)


def mha(X: Tensor, heads: list[HeadWeights], mask, rope: RopeParams | None = None) -> Tensor:
    """Sum of per-head outputs, each with its own output projection."""
    return add_n([dense_head(X, w, mask, rope) for w in heads])
