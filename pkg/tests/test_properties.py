import numpy as np
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mosalab.config import PRESETS, HeadGroup
from mosalab.flops import (
    flop_dense_head, flop_local_head, flop_model, flop_mosa_head, flop_routing_head, solve_iso_heads,
)
from mosalab.mosa import adaptive_k
from mosalab.rope import RopeParams, rope_apply
from mosalab.tensor import Tensor, gather_heads, gather_rows, scatter_heads, scatter_rows, topk, topk_indices

dims = st.integers(1, 2048)
finite = st.floats(-1e3, 1e3, allow_nan=False, width=64)


@given(T=dims, h=dims, d=dims, k=dims)
def test_head_flops_nonnegative(T, h, d, k):
    assert flop_dense_head(T, h, d) >= 0
    assert flop_mosa_head(T, h, d, k) >= 0
    assert flop_routing_head(T, h, d, k, 4) >= 0
    assert flop_local_head(T, h, d, k) >= 0


@given(T=dims, h=dims, d=dims, w=dims)
def test_local_never_exceeds_dense(T, h, d, w):
    assert flop_local_head(T, h, d, w) <= flop_dense_head(T, h, d)


@given(T=st.integers(1, 4096), h=st.integers(1, 512), d=st.integers(1, 128), k=st.integers(1, 4096))
def test_mosa_flops_grow_with_k(T, h, d, k):
    assert flop_mosa_head(T, h, d, k + 1) > flop_mosa_head(T, h, d, k)


@settings(max_examples=30, deadline=None)
@given(a=st.sampled_from([2, 4, 8, 16, 32, 64, 128, 256]), n_dense=st.integers(0, 8))
def test_solver_heads_monotone_in_sparsity(a, n_dense):
    # sparser heads are cheaper, so the budget buys at least as many
    base = PRESETS["tiny"]
    lo, hi = solve_iso_heads(base, a, n_dense), solve_iso_heads(base, 2 * a, n_dense)
    assert hi.sparse_heads >= lo.sparse_heads
    for sol in (lo, hi):
        assert sol.achieved_flops <= sol.baseline_flops
        assert flop_model(sol.config).total == sol.achieved_flops


@given(T=st.integers(1, 10_000), rho=st.integers(1, 1024))
def test_adaptive_k_bounds(T, rho):
    k = adaptive_k(T, rho)
    assert 1 <= k <= T
    assert k == T or k >= 2


@given(x=arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 12), st.just(8)), elements=finite),
       offset=st.integers(0, 5000))
def test_rope_preserves_norms(x, offset):
    pos = offset + np.arange(x.shape[-2])
    y = rope_apply(Tensor(x), pos, RopeParams(8)).data
    np.testing.assert_allclose(np.linalg.norm(y, axis=-1), np.linalg.norm(x, axis=-1), rtol=1e-12, atol=1e-9)


@given(q=arrays(np.float64, (8,), elements=st.floats(-3, 3)), k=arrays(np.float64, (8,), elements=st.floats(-3, 3)),
       i=st.integers(0, 300), j=st.integers(0, 300), s=st.integers(0, 300))
def test_rope_scores_depend_on_offset_only(q, k, i, j, s):
    p = RopeParams(8)
    def score(a, b):
        return rope_apply(Tensor(q[None]), [a], p).data[0] @ rope_apply(Tensor(k[None]), [b], p).data[0]
    assert abs(score(i, j) - score(i + s, j + s)) <= 1e-9 * (1 + abs(score(i, j)))


@given(v=arrays(np.float64, st.integers(1, 40), elements=st.floats(-5, 5)), data=st.data())
def test_topk_picks_largest_sorted(v, data):
    k = data.draw(st.integers(1, len(v)))
    vals, idx = topk(v, k)
    assert len(set(idx.tolist())) == k
    assert np.all(np.diff(idx) > 0)
    np.testing.assert_array_equal(vals.data, v[idx])
    rest = np.setdiff1d(np.arange(len(v)), idx)
    if len(rest):
        assert v[idx].min() >= v[rest].max()


@given(v=arrays(np.float64, (3, 17), elements=st.floats(-2, 2)), k=st.integers(1, 17))
def test_topk_rowwise(v, k):
    idx = topk_indices(v, k)
    for r in range(3):
        np.testing.assert_array_equal(idx[r], topk_indices(v[r], k))


@st.composite
def sorted_subsets(draw, T):
    mask = draw(arrays(np.bool_, T))
    mask[draw(st.integers(0, T - 1))] = True
    return np.flatnonzero(mask)


@given(data=st.data(), T=st.integers(1, 20))
def test_scatter_then_gather_is_identity(data, T):
    idx = data.draw(sorted_subsets(T))
    y = data.draw(arrays(np.float64, (len(idx), 3), elements=finite))
    full = scatter_rows(Tensor(y), idx, T)
    np.testing.assert_array_equal(gather_rows(full, idx).data, y)
    off = np.setdiff1d(np.arange(T), idx)
    assert np.all(full.data[off] == 0)


@given(data=st.data(), T=st.integers(1, 12), H=st.integers(1, 4))
def test_head_scatter_sums_gathered_rows(data, T, H):
    x = data.draw(arrays(np.float64, (T, 3), elements=finite))
    k = data.draw(st.integers(1, T))
    rng = np.random.default_rng(data.draw(st.integers(0, 1000)))
    idx = np.sort(np.stack([rng.choice(T, k, replace=False) for _ in range(H)]), axis=-1)
    out = scatter_heads(gather_heads(Tensor(x), idx), idx, T).data
    counts = np.zeros(T)
    for row in idx:
        counts[row] += 1
    np.testing.assert_allclose(out, counts[:, None] * x, rtol=1e-15, atol=0)


@settings(max_examples=25, deadline=None)
@given(n_dense=st.integers(0, 4), n_mosa=st.integers(0, 50), rho=st.sampled_from([2, 4, 8, 32]))
def test_model_flops_additive_over_groups(n_dense, n_mosa, rho):
    base = PRESETS["tiny"]
    cfg = base.with_heads([HeadGroup("dense", n_dense), HeadGroup("mosa", n_mosa, rho=rho)])
    ffn = base.with_heads([])
    r = flop_model(cfg)
    L, h, d, T = base.layers, base.hidden, base.head_dim, base.seq_len
    k = adaptive_k(T, rho)
    expect = flop_model(ffn).total + L * (n_dense * flop_dense_head(T, h, d) + n_mosa * flop_mosa_head(T, h, d, k))
    assert r.total == expect
