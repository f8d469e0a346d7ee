"""Pre-layer-norm transformer with a mixed per-layer head roster.

Heads of one roster group are stored stacked (``[H, h, h']`` etc.) and run
as one batched computation; a bank's output equals the sum of the per-head
functions in :mod:`mosalab.attention` and :mod:`mosalab.mosa` applied to its
slices. Routing heads keep per-head state and run one at a time.
"""
from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from .attention import HeadWeights, _normal, attention, causal_mask, init_head, local_mask
from .baselines import RoutingHeadState, fixed_indices, init_routing_head, routing_head
from .config import HeadGroup, ModelConfig
from .mosa import MosaHeadWeights, adaptive_k, init_mosa_head, select, selection_mask
from .rope import RopeParams, rope_apply
from .tensor import (
    Tensor, add, add_n, cross_entropy, embedding, gather_heads, gelu, head_merge, head_project,
    layer_norm, matmul, mul, reshape, scatter_heads, sigmoid, take_last, transpose,
)


@lru_cache(maxsize=32)
def _causal(T: int) -> Tensor:
    return causal_mask(T)


@lru_cache(maxsize=32)
def _local(T: int, window: int) -> Tensor:
    return local_mask(T, window)


def _stack(arrays) -> Tensor:
    return Tensor(np.stack(arrays), requires_grad=True)


class DenseBank:
    """``count`` dense (or sliding-window, with ``window``) heads."""

    def __init__(self, heads: list[HeadWeights], window: int | None = None):
        self.kind = "dense" if window is None else "local"
        self.window = window
        self.wq, self.wk, self.wv, self.wo = (
            _stack([getattr(w, n).data for w in heads]) for n in ("wq", "wk", "wv", "wo"))

    def parameters(self) -> dict[str, Tensor]:
        return {"wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo}

    def head(self, i: int) -> HeadWeights:
        return HeadWeights(*(Tensor(p.data[i].copy()) for p in self.parameters().values()))

    def __call__(self, X: Tensor, rope: RopeParams | None, training: bool = False) -> Tensor:
        T = X.shape[-2]
        q, k, v = head_project(X, self.wq), head_project(X, self.wk), head_project(X, self.wv)
        if rope is not None:
            pos = np.arange(T)
            q, k = rope_apply(q, pos, rope), rope_apply(k, pos, rope)
        mask = _causal(T) if self.window is None else _local(T, self.window)
        return head_merge(attention(q, k, v, mask), self.wo)


class SparseBank:
    """``count`` MoSA heads (learned router) or fixed-stride heads (``fixed=True``)."""

    def __init__(self, heads: list[HeadWeights], rho: int, include_first: bool = False,
                 fixed: bool = False):
        self.kind = "fixed" if fixed else "mosa"
        self.rho = rho
        self.include_first = include_first
        self.wq, self.wk, self.wv, self.wo = (
            _stack([getattr(w, n).data for w in heads]) for n in ("wq", "wk", "wv", "wo"))
        self.wr = None if fixed else _stack([w.wr.data for w in heads])  # [H, h]
        self.frozen: np.ndarray | None = None
        self.last_indices: np.ndarray | None = None

    @property
    def count(self) -> int:
        return self.wq.shape[0]

    def parameters(self) -> dict[str, Tensor]:
        p = {"wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo}
        if self.wr is not None:
            p["wr"] = self.wr
        return p

    def head(self, i: int) -> HeadWeights:
        parts = [Tensor(p.data[i].copy()) for p in self.parameters().values()]
        return MosaHeadWeights(*parts) if self.wr is not None else HeadWeights(*parts)

    def router(self, X: Tensor) -> Tensor:
        """Scores ``[..., H, T]`` for every head."""
        r = sigmoid(matmul(X, transpose(self.wr)))
        return transpose(r)

    def __call__(self, X: Tensor, rope: RopeParams | None, training: bool = False) -> Tensor:
        T = X.shape[-2]
        batch = X.shape[:-2] + (self.count,)
        scores = None
        if self.kind == "fixed":
            idx = np.broadcast_to(fixed_indices(T, self.rho), batch + (len(range(0, T, self.rho)),))
        elif self.frozen is not None:
            idx = self.frozen
            scores = take_last(self.router(X), idx)
        else:
            sel = select(self.router(X), adaptive_k(T, self.rho), self.include_first)
            idx, scores = sel.indices, sel.scores
        self.last_indices = idx
        Xs = gather_heads(X, idx)
        q, k, v = matmul(Xs, self.wq), matmul(Xs, self.wk), matmul(Xs, self.wv)
        if rope is not None:
            q, k = rope_apply(q, idx, rope), rope_apply(k, idx, rope)
        A = attention(q, k, v, selection_mask(idx))
        if scores is not None:
            A = mul(A, reshape(scores, scores.shape + (1,)))
        return scatter_heads(matmul(A, self.wo), idx, T)


class RoutingGroup:
    kind = "routing"

    def __init__(self, states: list[RoutingHeadState], rho: int):
        self.states = states
        self.rho = rho

    def parameters(self) -> dict[str, Tensor]:
        return {f"{i}.{n}": p for i, st in enumerate(self.states) for n, p in st.parameters().items()}

    @property
    def last_indices(self):
        return [st.last_indices for st in self.states]

    @property
    def frozen(self):
        return [st.frozen for st in self.states]

    @frozen.setter
    def frozen(self, value):
        for st, v in zip(self.states, value if value is not None else [None] * len(self.states)):
            st.frozen = v

    def __call__(self, X: Tensor, rope: RopeParams | None, training: bool = False) -> Tensor:
        return add_n([routing_head(X, st, self.rho, rope, training) for st in self.states])


def build_group(group: HeadGroup, rng: np.random.Generator, cfg: ModelConfig, dtype):
    h, hd, n = cfg.hidden, cfg.head_dim, group.count
    if group.kind in ("dense", "local"):
        return DenseBank([init_head(rng, h, hd, dtype) for _ in range(n)], group.window)
    if group.kind == "fixed":
        return SparseBank([init_head(rng, h, hd, dtype) for _ in range(n)], group.rho, fixed=True)
    if group.kind == "mosa":
        return SparseBank([init_mosa_head(rng, h, hd, dtype) for _ in range(n)], group.rho,
                          cfg.include_first)
    if group.kind == "routing":
        return RoutingGroup([init_routing_head(rng, h, hd, dtype, cfg.routing_decay) for _ in range(n)],
                            group.rho)
    raise ValueError(f"unknown head kind {group.kind!r}")


class Block:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype):
        h = cfg.hidden
        self.ln1 = (Tensor(np.ones(h, dtype=dtype), requires_grad=True),
                    Tensor(np.zeros(h, dtype=dtype), requires_grad=True))
        self.groups = [build_group(g, rng, cfg, dtype) for g in cfg.heads if g.count > 0]
        self.ln2 = (Tensor(np.ones(h, dtype=dtype), requires_grad=True),
                    Tensor(np.zeros(h, dtype=dtype), requires_grad=True))
        self.w1 = _normal(rng, (h, cfg.ff_mult * h), 1.0 / math.sqrt(h), dtype)
        self.w2 = _normal(rng, (cfg.ff_mult * h, h), 1.0 / math.sqrt(cfg.ff_mult * h), dtype)

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}ln1.gain": self.ln1[0], f"{prefix}ln1.bias": self.ln1[1]}
        for i, grp in enumerate(self.groups):
            for name, p in grp.parameters().items():
                out[f"{prefix}heads.{i}.{grp.kind}.{name}"] = p
        out.update({f"{prefix}ln2.gain": self.ln2[0], f"{prefix}ln2.bias": self.ln2[1],
                    f"{prefix}ff.w1": self.w1, f"{prefix}ff.w2": self.w2})
        return out

    def attend(self, x: Tensor, rope, training: bool = False) -> Tensor:
        """Hybrid attention: the sum of every head group's output on LN(x)."""
        a = layer_norm(x, *self.ln1)
        return add_n([grp(a, rope, training) for grp in self.groups])

    def __call__(self, x: Tensor, rope, training: bool = False) -> Tensor:
        x = add(x, self.attend(x, rope, training))
        f = layer_norm(x, *self.ln2)
        return add(x, matmul(gelu(matmul(f, self.w1)), self.w2))


class Model:
    """Embedding, ``layers`` pre-LN blocks, final layer norm, separate unembedding."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float64):
        self.config = config.validate()
        self.seed = seed
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        V, h = config.vocab, config.hidden
        self.embed = _normal(rng, (V, h), 0.02, self.dtype)
        self.blocks = [Block(config, rng, self.dtype) for _ in range(config.layers)]
        self.ln_f = (Tensor(np.ones(h, dtype=self.dtype), requires_grad=True),
                     Tensor(np.zeros(h, dtype=self.dtype), requires_grad=True))
        self.unembed = None if config.tie_embeddings else _normal(rng, (h, V), 0.02, self.dtype)
        self.rope = RopeParams(config.head_dim, config.rope_base)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"embed": self.embed}
        for i, b in enumerate(self.blocks):
            out.update(b.named_parameters(f"layers.{i}."))
        out["ln_f.gain"], out["ln_f.bias"] = self.ln_f
        if self.unembed is not None:
            out["unembed"] = self.unembed
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def groups(self, kind: str | None = None):
        for b in self.blocks:
            for grp in b.groups:
                if kind is None or grp.kind == kind:
                    yield grp

    def routing_states(self) -> list[RoutingHeadState]:
        return [st for grp in self.groups("routing") for st in grp.states]

    def freeze_selections(self) -> None:
        """Pin MoSA and routing heads to the token selections of the last forward pass."""
        for grp in self.groups():
            if grp.kind in ("mosa", "routing"):
                last = grp.last_indices
                if last is None or (isinstance(last, list) and any(x is None for x in last)):
                    raise RuntimeError("run a forward pass before freezing selections")
                grp.frozen = last

    def unfreeze_selections(self) -> None:
        for grp in self.groups():
            if grp.kind in ("mosa", "routing"):
                grp.frozen = None

    def __call__(self, ids, training: bool = False) -> Tensor:
        ids = np.asarray(ids)
        if ids.shape[-1] > self.config.seq_len:
            raise ValueError(f"{ids.shape[-1]} tokens exceed seq_len={self.config.seq_len}")
        x = embedding(self.embed, ids)
        for b in self.blocks:
            x = b(x, self.rope, training)
        x = layer_norm(x, *self.ln_f)
        out_w = self.unembed if self.unembed is not None else transpose(self.embed)
        return matmul(x, out_w)


def build_model(config: ModelConfig, seed: int = 0, precision: str = "float64") -> Model:
    return Model(config, seed, np.float64 if precision == "float64" else np.float32)


def lm_loss(model: Model, batch, training: bool = False) -> Tensor:
    """Mean next-token cross-entropy; ``batch`` is ``[B, T+1]`` token ids."""
    batch = np.asarray(batch)
    return cross_entropy(model(batch[..., :-1], training), batch[..., 1:])
