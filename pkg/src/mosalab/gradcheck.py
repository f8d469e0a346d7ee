"""Central finite-difference checks of every differentiable op and of end-to-end losses."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .attention import attention, causal_mask, dense_head, init_head
from .baselines import fixed_head, init_routing_head, routing_head
from .config import HeadGroup, ModelConfig, PRESETS
from .model import build_model, lm_loss
from .mosa import init_mosa_head, mosa_head, route_scores, select
from .rope import RopeParams, rope_apply
from . import tensor as tn
from .tensor import Tensor, finite_diff_check

TOLERANCE = 1e-4
SHAPES = [(5, 4), (2, 7, 6), (3, 2, 4, 8)]


@dataclass
class GradResult:
    name: str
    error: float

    @property
    def ok(self) -> bool:
        return self.error <= TOLERANCE


def _t(rng, shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _weighted(out: Tensor, rng) -> Tensor:
    # a random projection keeps every output entry in play
    w = rng.normal(size=out.shape)
    return tn.tsum(tn.mul(out, Tensor(w)))


def op_cases(rng: np.random.Generator) -> list[tuple[str, Callable, list[Tensor]]]:
    """(name, loss closure, inputs) for each op on several shapes."""
    cases = []
    for shape in SHAPES:
        tag = "x".join(map(str, shape))
        a, b = _t(rng, shape), _t(rng, shape)
        bshape = (1,) * (len(shape) - 1) + shape[-1:]
        c = _t(rng, bshape)
        gain, bias = _t(rng, shape[-1:], 0.5, 1.5), _t(rng, shape[-1:])
        cases += [
            (f"add[{tag}]", lambda a=a, c=c: _weighted(tn.add(a, c), rng_for(1)), [a, c]),
            (f"sub[{tag}]", lambda a=a, b=b: _weighted(tn.sub(a, b), rng_for(2)), [a, b]),
            (f"mul[{tag}]", lambda a=a, c=c: _weighted(tn.mul(a, c), rng_for(3)), [a, c]),
            (f"scale[{tag}]", lambda a=a: _weighted(tn.scale(a, 0.37), rng_for(4)), [a]),
            (f"sigmoid[{tag}]", lambda a=a: _weighted(tn.sigmoid(tn.scale(a, 3.0)), rng_for(5)), [a]),
            (f"gelu[{tag}]", lambda a=a: _weighted(tn.gelu(tn.scale(a, 2.0)), rng_for(6)), [a]),
            (f"transpose[{tag}]", lambda a=a: _weighted(tn.transpose(a), rng_for(7)), [a]),
            (f"reshape[{tag}]", lambda a=a, n=shape[-1]: _weighted(tn.reshape(a, (-1, n)), rng_for(8)), [a]),
            (f"tsum[{tag}]", lambda a=a: _weighted(tn.tsum(a, axis=-1), rng_for(9)), [a]),
            (f"mean[{tag}]", lambda a=a: _weighted(tn.mean(a, axis=0), rng_for(10)), [a]),
            (f"add_n[{tag}]", lambda a=a, b=b: _weighted(tn.add_n([a, b, a]), rng_for(11)), [a, b]),
            (f"layer_norm[{tag}]", lambda a=a, g=gain, d=bias:
                _weighted(tn.layer_norm(a, g, d), rng_for(12)), [a, gain, bias]),
        ]
        T = shape[-2]
        w = _t(rng, shape[-1:] + (3,))
        cases.append((f"matmul[{tag}]", lambda a=a, w=w: _weighted(tn.matmul(a, w), rng_for(13)), [a, w]))
        bt = _t(rng, shape[:-2] + (shape[-1], 3))
        cases.append((f"matmul_batched[{tag}]", lambda a=a, bt=bt: _weighted(tn.matmul(a, bt), rng_for(14)),
                      [a, bt]))
        mask = causal_mask(T).data
        cases.append((f"masked_softmax_rows[{tag}]",
                      lambda s=_t(rng, shape[:-1] + (T,), -3, 3), m=mask:
                      _weighted(tn.masked_softmax_rows(s, m), rng_for(15)), None))
        k = max(1, T // 2)
        idx = np.sort(np.random.default_rng(T).choice(T, size=k, replace=False))
        cases.append((f"gather_rows[{tag}]", lambda a=a, i=idx: _weighted(tn.gather_rows(a, i), rng_for(16)), [a]))
        y = _t(rng, shape[:-2] + (k, shape[-1]))
        cases.append((f"scatter_rows[{tag}]", lambda y=y, i=idx, T=T: _weighted(tn.scatter_rows(y, i, T), rng_for(17)),
                      [y]))
        cols = np.unique(idx % shape[-1])
        cols = np.broadcast_to(cols, shape[:-1] + cols.shape)
        cases.append((f"take_last[{tag}]", lambda a=a, i=cols: _weighted(tn.take_last(a, i), rng_for(18)), [a]))
        cases.append((f"cross_entropy[{tag}]",
                      lambda a=a, tgt=np.random.default_rng(1).integers(0, shape[-1], size=shape[:-1]):
                      tn.cross_entropy(tn.scale(a, 2.0), tgt), [a]))
        if shape[-1] % 2 == 0:
            params = RopeParams(shape[-1])
            pos = np.arange(T) * 3 + 1
            cases.append((f"rope_apply[{tag}]", lambda a=a, p=params, pos=pos:
                          _weighted(rope_apply(a, pos, p), rng_for(19)), [a]))
    # head-stacked ops
    for B, H, T, h, d in [(1, 2, 5, 4, 2), (2, 3, 6, 5, 4), (2, 1, 4, 3, 2)]:
        tag = f"{B}x{H}x{T}x{h}x{d}"
        X, W, Wo = _t(rng, (B, T, h)), _t(rng, (H, h, d)), _t(rng, (H, d, h))
        A = _t(rng, (B, H, T, d))
        k = max(1, T // 2)
        r = np.random.default_rng(T + H)
        idx = np.sort(np.stack([np.stack([r.choice(T, size=k, replace=False) for _ in range(H)])
                                for _ in range(B)]), axis=-1)
        Y = _t(rng, (B, H, k, h))
        cases += [
            (f"head_project[{tag}]", lambda X=X, W=W: _weighted(tn.head_project(X, W), rng_for(20)), [X, W]),
            (f"head_merge[{tag}]", lambda A=A, Wo=Wo: _weighted(tn.head_merge(A, Wo), rng_for(21)), [A, Wo]),
            (f"gather_heads[{tag}]", lambda X=X, i=idx: _weighted(tn.gather_heads(X, i), rng_for(22)), [X]),
            (f"scatter_heads[{tag}]", lambda Y=Y, i=idx, T=T: _weighted(tn.scatter_heads(Y, i, T), rng_for(23)),
             [Y]),
        ]
    table = _t(rng, (11, 4))
    ids = np.array([[1, 3, 3, 10], [0, 1, 2, 3]])
    cases.append(("embedding", lambda: _weighted(tn.embedding(table, ids), rng_for(24)), [table]))
    return [(n, f, xs if xs is not None else list(_closure_tensors(f))) for n, f, xs in cases]


def _closure_tensors(f):
    return [v for v in (f.__defaults__ or ()) if isinstance(v, Tensor)]


def rng_for(i: int) -> np.random.Generator:
    return np.random.default_rng(1000 + i)


def head_cases(rng: np.random.Generator) -> list[tuple[str, Callable, list[Tensor]]]:
    """Attention heads with their weights and inputs as variables."""
    cases = []
    for B, T, h, d in [(1, 6, 8, 4), (2, 9, 6, 4), (2, 16, 12, 8)]:
        tag = f"{B}x{T}x{h}x{d}"
        rope = RopeParams(d)
        X = _t(rng, (B, T, h))
        w = init_head(rng, h, d)
        cases.append((f"attention[{tag}]", lambda q=_t(rng, (B, T, d)), k=_t(rng, (B, T, d)), v=_t(rng, (B, T, d)):
                      _weighted(attention(q, k, v, causal_mask(q.shape[-2])), rng_for(30)), None))
        cases.append((f"dense_head[{tag}]", lambda X=X, w=w, r=rope:
                      _weighted(dense_head(X, w, causal_mask(X.shape[-2]), r), rng_for(31)),
                      [X, *w.parameters().values()]))
        mw = init_mosa_head(rng, h, d)
        k = max(2, T // 3)
        with tn.no_grad():
            sel = select(route_scores(X, mw.wr), k, True)
        cases.append((f"mosa_head_frozen[{tag}]", lambda X=X, w=mw, i=sel.indices, k=k, r=rope:
                      _weighted(mosa_head(X, w, k, True, r, indices=i), rng_for(32)),
                      [X, *mw.parameters().values()]))
        fw = init_head(rng, h, d)
        cases.append((f"fixed_head[{tag}]", lambda X=X, w=fw, r=rope:
                      _weighted(fixed_head(X, w, 3, r), rng_for(33)), [X, *fw.parameters().values()]))
        rho = 2 if T % 2 == 0 else 3
        st = init_routing_head(rng, h, d)
        with tn.no_grad():
            routing_head(X, st, rho, rope)
        st.frozen = st.last_indices
        cases.append((f"routing_head_frozen[{tag}]", lambda X=X, st=st, rho=rho, r=rope:
                      _weighted(routing_head(X, st, rho, r), rng_for(34)), [X, *st.parameters().values()]))
    return [(n, f, xs if xs is not None else list(_closure_tensors(f))) for n, f, xs in cases]


def nano_gradcheck_config(kind: str) -> ModelConfig:
    """The Nano shape with a single-kind roster for end-to-end checks."""
    base = PRESETS["nano"]
    groups = {"dense": [HeadGroup("dense", 2)],
              "mosa": [HeadGroup("dense", 1), HeadGroup("mosa", 3, rho=4)],
              "routing": [HeadGroup("dense", 1), HeadGroup("routing", 2, rho=4)]}[kind]
    return base.with_heads(groups, name=f"nano-grad-{kind}")


def model_case(kind: str, seed: int = 0, T: int = 24, B: int = 2):
    """End-to-end loss of a 2-layer Nano model with frozen selections."""
    cfg = nano_gradcheck_config(kind)
    model = build_model(cfg, seed)
    batch = np.random.default_rng(seed + 7).integers(0, cfg.vocab, size=(B, T + 1))
    with tn.no_grad():
        lm_loss(model, batch)
    model.freeze_selections()
    return model, (lambda _x: lm_loss(model, batch)), model.parameters()


def run_suite(seed: int = 0, model_entries: int = 8) -> list[GradResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, f, xs in op_cases(rng) + head_cases(rng):
        results.append(GradResult(name, float(finite_diff_check(lambda _x, f=f: f(), xs))))
    for kind in ("dense", "mosa", "routing"):
        _, f, params = model_case(kind, seed)
        err = finite_diff_check(f, params, max_entries=model_entries, rng=np.random.default_rng(seed))
        results.append(GradResult(f"nano_loss[{kind}]", float(err)))
    return results
