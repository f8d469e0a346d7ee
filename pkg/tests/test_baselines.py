import numpy as np
import pytest

from mosalab.baselines import fixed_indices, init_routing_head, routing_head
from mosalab.rope import RopeParams
from mosalab.tensor import Tensor
from reference import rope_complex, softmax_attention_rows


def test_fixed_indices():
    assert fixed_indices(8, 2).tolist() == [0, 2, 4, 6]
    assert fixed_indices(10, 4).tolist() == [0, 4, 8]
    assert fixed_indices(5, 1).tolist() == [0, 1, 2, 3, 4]
    with pytest.raises(ValueError):
        fixed_indices(5, 0)


def _routing_ref(X, st, rho):
    """Per-cluster loop: top-k by centroid similarity, attention, sum, output projection."""
    T = X.shape[0]
    k = T // rho
    H, V = X @ st.wqk.data, X @ st.wv.data
    acc = np.zeros((T, H.shape[1]))
    for c in range(rho):
        sims = H @ st.centroids[c]
        idx = sorted(sorted(range(T), key=lambda t: (-sims[t], t))[:k])
        hq = rope_complex(H[idx], idx)
        acc[idx] += softmax_attention_rows(hq, hq, V[idx], lambda i, j: idx[j] <= idx[i])
    return acc @ st.wo.data


def test_routing_head_matches_reference(rng):
    T, h, d, rho = 16, 10, 8, 4
    st = init_routing_head(rng, h, d)
    X = rng.normal(size=(T, h))
    out = routing_head(Tensor(X), st, rho, RopeParams(d)).data
    np.testing.assert_allclose(out, _routing_ref(X, st, rho), atol=1e-12)


def test_routing_clusters_have_exactly_k_tokens(rng):
    T, rho = 24, 3
    st = init_routing_head(rng, 8, 4)
    routing_head(Tensor(rng.normal(size=(2, T, 8))), st, rho)
    assert len(st.last_indices) == rho
    for idx in st.last_indices:
        assert idx.shape == (2, T // rho)


def test_routing_rows_outside_all_clusters_are_zero(rng):
    T, rho = 20, 5
    st = init_routing_head(rng, 8, 4)
    out = routing_head(Tensor(rng.normal(size=(T, 8))), st, rho).data
    covered = np.unique(np.concatenate(st.last_indices))
    off = np.setdiff1d(np.arange(T), covered)
    assert np.all(out[off] == 0.0)


def test_centroid_moving_average(rng):
    T, h, d, rho = 12, 6, 4, 3
    st = init_routing_head(rng, h, d)
    X = rng.normal(size=(T, h))
    routing_head(Tensor(X), st, rho)  # initialises centroids
    before = st.centroids.copy()
    routing_head(Tensor(X), st, rho, training=True)
    H = X @ st.wqk.data
    for c, idx in enumerate(st.last_indices):
        expect = st.decay * before[c] + (1 - st.decay) * H[idx].mean(axis=0)
        np.testing.assert_allclose(st.centroids[c], expect, atol=1e-15)


def test_centroids_fixed_outside_training(rng):
    st = init_routing_head(rng, 6, 4)
    X = Tensor(rng.normal(size=(8, 6)))
    routing_head(X, st, 2)
    before = st.centroids.copy()
    routing_head(X, st, 2)
    np.testing.assert_array_equal(st.centroids, before)


def test_frozen_clusters_reused(rng):
    st = init_routing_head(rng, 6, 4)
    X = rng.normal(size=(8, 6))
    routing_head(Tensor(X), st, 2)
    st.frozen = st.last_indices
    before = st.centroids.copy()
    routing_head(Tensor(rng.normal(size=(8, 6))), st, 2, training=True)
    assert all(a is b for a, b in zip(st.last_indices, st.frozen))
    np.testing.assert_array_equal(st.centroids, before)


def test_routing_needs_rho_dividing_t(rng):
    st = init_routing_head(rng, 6, 4)
    with pytest.raises(ValueError):
        routing_head(Tensor(rng.normal(size=(10, 6))), st, 3)
