import numpy as np
import pytest

from mosalab import tensor as tn
from mosalab.gradcheck import TOLERANCE, op_cases
from mosalab.tensor import SENTINEL, ShapeError, Tensor, count_macs, finite_diff_check, no_grad


def test_every_op_passes_finite_differences():
    # [DERIVED] central differences are the oracle; each op runs on at least three shapes
    cases = op_cases(np.random.default_rng(3))
    names = {n.split("[")[0] for n, _, _ in cases}
    assert {"matmul", "masked_softmax_rows", "gather_rows", "scatter_rows", "layer_norm",
            "cross_entropy", "gelu", "sigmoid", "rope_apply", "head_project", "head_merge",
            "gather_heads", "scatter_heads", "take_last", "embedding"} <= names
    for name, f, xs in cases:
        err = finite_diff_check(lambda _x, f=f: f(), xs)
        assert err <= TOLERANCE, (name, err)


def test_backward_accumulates_over_shared_inputs():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = tn.tsum(tn.add(tn.mul(x, x), x))
    y.backward()
    np.testing.assert_array_equal(x.grad, 2 * x.data + 1)


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = tn.mul(x, x)
    assert not y.requires_grad


def test_matmul_shape_error_names_dims():
    with pytest.raises(ShapeError, match=r"3 != 4"):
        tn.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_matmul_macs_counted():
    with count_macs() as c:
        tn.matmul(Tensor(np.ones((2, 5, 3))), Tensor(np.ones((3, 4))))
    assert c.matmul == 2 * 5 * 3 * 4


def test_softmax_masked_entries_are_exact_zero():
    s = Tensor(np.random.default_rng(0).normal(size=(4, 4)))
    mask = np.where(np.tril(np.ones((4, 4))) > 0, 0.0, SENTINEL)
    p = tn.masked_softmax_rows(s, mask).data
    assert np.all(p[np.triu_indices(4, 1)] == 0.0)
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-15)


def test_softmax_rejects_fully_masked_row():
    mask = np.zeros((3, 3))
    mask[1] = SENTINEL
    with pytest.raises(ValueError, match="no allowed entry"):
        tn.masked_softmax_rows(Tensor(np.zeros((3, 3))), mask)


def test_softmax_large_logits_stay_finite():
    s = Tensor(np.array([[1000.0, 999.0, -1000.0]]))
    p = tn.masked_softmax_rows(s, np.zeros((1, 3))).data
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p[0, :2], [1 / (1 + np.exp(-1)), np.exp(-1) / (1 + np.exp(-1))])


def test_topk_ties_prefer_lower_index():
    # [TRIVIAL] stable ordering: equal values resolve toward earlier positions
    vals = np.array([0.5, 0.9, 0.5, 0.9, 0.1])
    np.testing.assert_array_equal(tn.topk_indices(vals, 2), [1, 3])
    np.testing.assert_array_equal(tn.topk_indices(vals, 3), [0, 1, 3])
    np.testing.assert_array_equal(tn.topk_indices(np.zeros(6), 3), [0, 1, 2])


def test_topk_returns_ascending_positions_with_values():
    vals = Tensor(np.array([[0.1, 0.7, 0.3, 0.9]]))
    scores, idx = tn.topk(vals, 2)
    np.testing.assert_array_equal(idx, [[1, 3]])
    np.testing.assert_array_equal(scores.data, [[0.7, 0.9]])


def test_gather_scatter_round_trip():
    x = np.arange(12.0).reshape(6, 2)
    idx = np.array([0, 2, 5])
    g = tn.gather_rows(Tensor(x), idx).data
    np.testing.assert_array_equal(g, x[idx])
    s = tn.scatter_rows(Tensor(g), idx, 6).data
    np.testing.assert_array_equal(s[idx], x[idx])
    assert np.all(s[[1, 3, 4]] == 0)


def test_gather_rejects_bad_indices():
    x = Tensor(np.zeros((4, 2)))
    with pytest.raises(ValueError):
        tn.gather_rows(x, np.array([0, 4]))
    with pytest.raises(ValueError):
        tn.gather_rows(x, np.array([2, 1]))


def test_head_project_matches_per_head_products(rng):
    X, W = rng.normal(size=(2, 5, 4)), rng.normal(size=(3, 4, 2))
    out = tn.head_project(Tensor(X), Tensor(W)).data
    for h in range(3):
        np.testing.assert_allclose(out[:, h], X @ W[h], atol=1e-14)


def test_head_merge_matches_sum_of_products(rng):
    A, W = rng.normal(size=(2, 3, 5, 2)), rng.normal(size=(3, 2, 4))
    out = tn.head_merge(Tensor(A), Tensor(W)).data
    np.testing.assert_allclose(out, sum(A[:, h] @ W[h] for h in range(3)), atol=1e-14)


def test_scatter_heads_sums_over_heads():
    y = np.ones((1, 2, 2, 1))
    idx = np.array([[[0, 2], [2, 3]]])
    out = tn.scatter_heads(Tensor(y), idx, 4).data
    np.testing.assert_array_equal(out[0, :, 0], [1, 0, 2, 1])


def test_cross_entropy_uniform_is_log_v():
    # [TRIVIAL] equal logits give ln V
    loss = tn.cross_entropy(Tensor(np.zeros((3, 7))), np.array([0, 3, 6])).item()
    assert loss == pytest.approx(np.log(7), abs=1e-15)


def test_cross_entropy_rejects_out_of_range_target():
    with pytest.raises(ValueError):
        tn.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_layer_norm_zero_mean_unit_variance(rng):
    x = Tensor(rng.normal(3.0, 5.0, size=(4, 16)))
    y = tn.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    np.testing.assert_allclose(y.mean(-1), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(-1), 1, atol=1e-4)


def test_float32_stays_float32():
    x = Tensor(np.ones((2, 3), dtype=np.float32), requires_grad=True)
    y = tn.gelu(tn.scale(tn.sigmoid(x), 2.0))
    assert y.dtype == np.float32
    tn.tsum(y).backward()
    assert x.grad.dtype == np.float32
