"""Sparse attention baselines: fixed-stride heads and Routing Attention."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attention import HeadWeights, _normal, attention
from .mosa import selection_mask, sparse_attend
from .rope import RopeParams, rope_apply
from .tensor import Tensor, add_n, gather_rows, matmul, scatter_rows, topk_indices


def fixed_indices(T: int, rho: int) -> np.ndarray:
    """Positions 0, rho, 2*rho, ... below T.

    When rho does not divide T the ragged tail keeps its leading position,
    giving floor(T / rho) + 1 entries.
    """
    if rho < 1:
        raise ValueError(f"stride must be >= 1, got {rho}")
    return np.arange(0, T, rho, dtype=np.int64)


def fixed_head(X: Tensor, w: HeadWeights, rho: int, rope: RopeParams | None = None) -> Tensor:
    return sparse_attend(X, w, fixed_indices(X.shape[-2], rho), None, rope)


@dataclass
class RoutingHeadState:
    wqk: Tensor   # h x h', shared query/key projection
    wv: Tensor    # h x h'
    wo: Tensor    # h' x h
    centroids: np.ndarray | None = None  # rho x h'
    decay: float = 0.999
    seed: int = 0
    frozen: list | None = None            # per-cluster index arrays reused verbatim when set
    last_indices: list | None = field(default=None, repr=False)

    def parameters(self) -> dict[str, Tensor]:
        return {"wqk": self.wqk, "wv": self.wv, "wo": self.wo}

    def init_centroids(self, projected: np.ndarray, rho: int) -> None:
        """Seed the centroids with rho distinct projected token rows."""
        rows = projected.reshape(-1, projected.shape[-1])
        rng = np.random.default_rng(self.seed)
        pick = rng.choice(rows.shape[0], size=rho, replace=False)
        self.centroids = rows[pick].copy()

    def update_centroids(self, projected: np.ndarray, clusters: list[np.ndarray]) -> None:
        """Moving average toward the mean of each cluster's member rows."""
        for c, idx in enumerate(clusters):
            members = np.take_along_axis(projected, idx[..., None], axis=-2)
            batch_mean = members.reshape(-1, members.shape[-1]).mean(axis=0)
            self.centroids[c] = self.decay * self.centroids[c] + (1.0 - self.decay) * batch_mean


def init_routing_head(rng: np.random.Generator, hidden: int, head_dim: int, dtype=np.float64,
                      decay: float = 0.999) -> RoutingHeadState:
    std = 1.0 / math.sqrt(hidden)
    wqk, wv, wo = (_normal(rng, s, std, dtype) for s in
                   [(hidden, head_dim), (hidden, head_dim), (head_dim, hidden)])
    return RoutingHeadState(wqk, wv, wo, decay=decay, seed=int(rng.integers(2**63)))


def routing_head(X: Tensor, state: RoutingHeadState, rho: int, rope: RopeParams | None = None,
                 training: bool = False) -> Tensor:
    """Routing Attention head with rho clusters of exactly k = T / rho tokens.

    Each centroid claims the k tokens whose shared projection has the largest
    dot product with it; clusters are picked independently, so a token may
    land in several clusters or in none. Attention runs inside each cluster
    with the original-position causal mask, and cluster outputs are summed
    before the output projection.
    """
    T = X.shape[-2]
    if rho < 1 or T % rho:
        raise ValueError(f"routing_head needs rho dividing T, got T={T}, rho={rho}")
    k = T // rho
    Hqk = matmul(X, state.wqk)
    V = matmul(X, state.wv)
    if state.frozen is not None:
        clusters = state.frozen
    else:
        if state.centroids is None:
            state.init_centroids(Hqk.data, rho)
        if state.centroids.shape[0] != rho:
            raise ValueError(f"state has {state.centroids.shape[0]} centroids, rho={rho}")
        sims = Hqk.data @ state.centroids.T.astype(Hqk.dtype)
        clusters = [topk_indices(sims[..., c], k) for c in range(rho)]
    outs = []
    for idx in clusters:
        h = gather_rows(Hqk, idx)
        if rope is not None:
            h = rope_apply(h, idx, rope)
        A = attention(h, h, gather_rows(V, idx), selection_mask(idx))
        outs.append(scatter_rows(A, idx, T))
    state.last_indices = clusters
    if training and state.frozen is None:
        state.update_centroids(Hqk.data, clusters)
    return matmul(add_n(outs), state.wo)
