import math
from dataclasses import replace

import numpy as np
import pytest

from mosalab import tensor as tn
from mosalab.attention import causal_mask, dense_head, local_mask
from mosalab.baselines import fixed_head
from mosalab.config import NANO_TRAIN, PRESETS, ConfigError, HeadGroup, ModelConfig
from mosalab.flops import solve_iso_heads
from mosalab.gradcheck import model_case
from mosalab.model import DenseBank, SparseBank, build_model, lm_loss
from mosalab.mosa import adaptive_k, mosa_head
from mosalab.optim import AdamState, adam_step
from mosalab.tensor import Tensor, finite_diff_check


def _small(groups, layers=2, **kw):
    return ModelConfig(layers=layers, hidden=16, head_dim=8, vocab=13, seq_len=12, heads=tuple(groups), **kw)


def test_zero_layers_is_embed_norm_unembed(rng):
    cfg = _small([], layers=0)
    m = build_model(cfg, 3)
    ids = rng.integers(0, 13, size=(2, 5))
    e = m.embed.data[ids]
    norm = (e - e.mean(-1, keepdims=True)) / np.sqrt(e.var(-1, keepdims=True) + 1e-5)
    np.testing.assert_allclose(m(ids).data, norm @ m.unembed.data, atol=1e-12)


def test_initial_loss_near_log_vocab(rng):
    for cfg in (PRESETS["nano"], solve_iso_heads(PRESETS["nano"], 4, 4).config):
        m = build_model(cfg, 0)
        loss = lm_loss(m, rng.integers(0, 257, size=(2, 65))).item()
        assert math.isfinite(loss) and loss <= math.log(257) + 0.1


def test_same_seed_same_weights():
    cfg = _small([HeadGroup("dense", 1), HeadGroup("mosa", 2, rho=2), HeadGroup("routing", 1, rho=3)])
    a, b = build_model(cfg, 7).named_parameters(), build_model(cfg, 7).named_parameters()
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    c = build_model(cfg, 8).named_parameters()
    assert not np.array_equal(a["embed"].data, c["embed"].data)


def test_block_keeps_residual_shape(rng):
    cfg = _small([HeadGroup("dense", 2), HeadGroup("mosa", 3, rho=3), HeadGroup("fixed", 1, rho=2),
                  HeadGroup("local", 1, window=3), HeadGroup("routing", 1, rho=4)])
    m = build_model(cfg)
    x = Tensor(rng.normal(size=(2, 12, 16)))
    for b in m.blocks:
        assert b(x, m.rope).shape == (2, 12, 16)


def test_dense_bank_equals_per_head_sum(rng):
    cfg = _small([HeadGroup("dense", 3), HeadGroup("local", 2, window=4)])
    m = build_model(cfg)
    X = Tensor(rng.normal(size=(2, 12, 16)))
    for bank, mask in zip(m.blocks[0].groups, (causal_mask(12), local_mask(12, 4))):
        ref = sum(dense_head(X, bank.head(i), mask, m.rope).data for i in range(3 if bank.kind == "dense" else 2))
        np.testing.assert_allclose(bank(X, m.rope).data, ref, atol=1e-12)


def test_sparse_banks_equal_per_head_sum(rng):
    cfg = _small([HeadGroup("mosa", 4, rho=3), HeadGroup("fixed", 2, rho=5)])
    m = build_model(cfg)
    X = Tensor(rng.normal(size=(2, 12, 16)))
    mosa, fixed = m.blocks[0].groups
    k = adaptive_k(12, 3)
    ref = sum(mosa_head(X, mosa.head(i), k, True, m.rope).data for i in range(4))
    np.testing.assert_allclose(mosa(X, m.rope).data, ref, atol=1e-12)
    ref = sum(fixed_head(X, fixed.head(i), 5, m.rope).data for i in range(2))
    np.testing.assert_allclose(fixed(X, m.rope).data, ref, atol=1e-12)


def test_zero_weighted_head_changes_nothing(rng):
    cfg = _small([HeadGroup("dense", 3)])
    bank = build_model(cfg).blocks[0].groups[0]
    X = Tensor(rng.normal(size=(12, 16)))
    full = bank(X, None).data
    bank.wo.data[2] = 0.0
    heads = [bank.head(i) for i in range(2)]
    np.testing.assert_allclose(bank(X, None).data, DenseBank(heads)(X, None).data, atol=1e-12)
    assert not np.allclose(full, bank(X, None).data)


def test_hybrid_layer_is_sum_of_groups(rng):
    cfg = _small([HeadGroup("dense", 2), HeadGroup("mosa", 2, rho=2)])
    block = build_model(cfg).blocks[0]
    x = Tensor(rng.normal(size=(12, 16)))
    a = tn.layer_norm(x, *block.ln1)
    rope = build_model(cfg).rope
    total = sum(g(a, rope).data for g in block.groups)
    np.testing.assert_allclose(block.attend(x, rope).data, total, atol=1e-12)


def test_dense_model_is_causal(rng):
    m = build_model(_small([HeadGroup("dense", 2)]))
    ids = rng.integers(0, 13, size=(1, 12))
    ids2 = ids.copy()
    ids2[0, 7:] = (ids2[0, 7:] + 1) % 13
    np.testing.assert_array_equal(m(ids).data[0, :7], m(ids2).data[0, :7])


def test_freeze_requires_forward_pass():
    m = build_model(_small([HeadGroup("mosa", 1, rho=2)]))
    with pytest.raises(RuntimeError):
        m.freeze_selections()


def test_freeze_pins_selection(rng):
    m = build_model(_small([HeadGroup("mosa", 2, rho=3), HeadGroup("routing", 1, rho=3)]))
    ids = rng.integers(0, 13, size=(2, 12))
    m(ids)
    m.freeze_selections()
    pinned = [g.last_indices for g in m.groups()]
    m(rng.integers(0, 13, size=(2, 12)))
    for before, g in zip(pinned, m.groups()):
        after = g.last_indices
        if isinstance(before, list):
            assert all(a is b for a, b in zip(before, after))
        else:
            assert after is before
    m.unfreeze_selections()
    assert all(g.frozen is None for g in m.groups("mosa"))


def test_loss_drops_after_one_step_on_repeated_batch(rng):
    # [TRIVIAL] overfit sanity
    cfg = _small([HeadGroup("dense", 1), HeadGroup("mosa", 2, rho=2)])
    m = build_model(cfg)
    batch = rng.integers(0, 13, size=(2, 13))
    params = m.named_parameters()
    tc = replace(NANO_TRAIN, warmup=1)
    loss0 = lm_loss(m, batch, training=True)
    loss0.backward()
    adam_step(params, {n: p.grad for n, p in params.items()}, AdamState(), 1, tc)
    assert lm_loss(m, batch).item() < loss0.item()


def test_end_to_end_gradients():
    # [DERIVED] finite-difference oracle on the 2-layer Nano shape, selections frozen
    for kind in ("dense", "mosa", "routing"):
        _, f, params = model_case(kind, seed=1, T=16)
        assert finite_diff_check(f, params, max_entries=4, rng=np.random.default_rng(1)) <= 1e-4


def test_too_long_input_rejected():
    m = build_model(_small([HeadGroup("dense", 1)]))
    with pytest.raises(ValueError):
        m(np.zeros((1, 13), dtype=int))


def test_invalid_roster_rejected():
    with pytest.raises(ConfigError):
        _small([HeadGroup("mosa", 2)]).validate()
    with pytest.raises(ConfigError):
        _small([HeadGroup("routing", 1, rho=5)]).validate()
    with pytest.raises(ConfigError):
        _small([HeadGroup("sparkly", 1)]).validate()


def test_float32_model(rng):
    m = build_model(_small([HeadGroup("dense", 1), HeadGroup("mosa", 1, rho=2)]), precision="float32")
    loss = lm_loss(m, rng.integers(0, 13, size=(2, 13)), training=True)
    loss.backward()
    assert loss.dtype == np.float32
    assert all(p.grad.dtype == np.float32 for p in m.parameters() if p.grad is not None)


def test_bank_classes_exposed():
    m = build_model(_small([HeadGroup("dense", 1), HeadGroup("mosa", 1, rho=2)]))
    assert isinstance(m.blocks[0].groups[0], DenseBank)
    assert isinstance(m.blocks[0].groups[1], SparseBank)
