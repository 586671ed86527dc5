import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mka import rng
from mka.engines import (
    BlockPlan,
    DegenerateDenominator,
    KvCache,
    OnlineSoftmaxState,
    block_mka,
    block_mka_forward,
    fastmka_decode_step,
    fastmka_forward,
    gated_mixture_direct,
    gated_mixture_recursive,
    gated_mixture_stable,
    reference_causal_mha,
    symbolic_mka_forward,
    tier_ablation,
)
from mka.engines.dense import ProjectionSet
from mka.harness.oracles import brute_prefix_mean, naive_attention, naive_causal_mha, windowed_causal
from mka.memory import ChunkStore, SummaryMode, chunk_store_from_sequence
from mka.routing import GateParams, RoutingPolicy
from mka.tensor import ModelDims

DIMS = ModelDims(8, 2)
TOP1 = RoutingPolicy("hard_topk", 1)


def model(seed=0, s=6, b=2):
    return rng.normal(rng.derive(seed, 1), (b, s, DIMS.d_model)), ProjectionSet.init(DIMS.d_model, seed)


def naive_heads(q, k, v, dims, visible):
    tau = 1 / math.sqrt(dims.d_head)
    cols = [slice(h * dims.d_head, (h + 1) * dims.d_head) for h in range(dims.n_heads)]
    return np.concatenate([naive_attention(q[:, c], k[:, c], v[:, c], visible, tau) for c in cols], axis=1)


# -- dense engines ---------------------------------------------------------------


def test_single_token_is_value_projection():
    x, proj = model(s=1)
    expected = x @ proj.w_v @ proj.w_o
    assert np.allclose(reference_causal_mha(x, proj, DIMS), expected, rtol=1e-13)
    gp = GateParams.init(DIMS.d_model, seed=4)
    # fused tokens equal x when every summary of one token is that token
    assert np.allclose(fastmka_forward(x, proj, gp, DIMS)[0], expected, rtol=1e-13)


def test_reference_mha_matches_loops():
    x, proj = model(1, s=7)
    assert np.allclose(reference_causal_mha(x, proj, DIMS), naive_causal_mha(x, proj, DIMS), rtol=1e-12, atol=1e-13)


def test_symbolic_uniform_gate_is_average_of_level_attentions():
    x, proj = model(2, s=5, b=1)
    out, _ = symbolic_mka_forward(x, proj, GateParams.init(DIMS.d_model), DIMS, policy=RoutingPolicy("fixed_uniform"))
    q = x[0] @ proj.w_q
    causal = lambda i, j: j <= i
    m2 = brute_prefix_mean(x)[0]
    a1 = naive_heads(q, x[0] @ proj.w_k, x[0] @ proj.w_v, DIMS, causal)
    a2 = naive_heads(q, m2 @ proj.w_k, m2 @ proj.w_v, DIMS, causal)
    # L3 is all zeros without a store, so its values are zero
    expected = ((a1 + a2) / 3) @ proj.w_o
    assert np.allclose(out[0], expected, rtol=1e-12, atol=1e-13)


def test_fastmka_l2_only_attends_running_means():
    x, proj = model(3, s=6, b=1)
    gp = GateParams.constant(DIMS.d_model, [0.0, 1.0, 0.0])
    out, _ = fastmka_forward(x, proj, gp, DIMS, policy=TOP1)
    m2 = brute_prefix_mean(x)[0]
    a = naive_heads(x[0] @ proj.w_q, m2 @ proj.w_k, m2 @ proj.w_v, DIMS, lambda i, j: j <= i)
    assert np.allclose(out[0], a @ proj.w_o, rtol=1e-12, atol=1e-13)


def test_l1_gate_collapses_every_engine_to_mha():
    x, proj = model(4, s=16)
    gp = GateParams.constant(DIMS.d_model, [1.0, 0.0, 0.0])
    ref = reference_causal_mha(x, proj, DIMS)
    assert np.abs(symbolic_mka_forward(x, proj, gp, DIMS, policy=TOP1)[0] - ref).max() < 1e-12
    assert np.abs(fastmka_forward(x, proj, gp, DIMS, policy=TOP1)[0] - ref).max() < 1e-12
    for b in (1, 3, 16):
        out = block_mka_forward(x, proj, DIMS, BlockPlan(16, b, pad=True))
        assert np.abs(out - ref).max() < 1e-12


@pytest.mark.parametrize("mode", [SummaryMode(), SummaryMode("ema", 0.8)])
def test_decode_matches_full_recompute(mode):
    x, proj = model(5, s=10)
    gp = GateParams.init(DIMS.d_model, seed=5, scale=0.5)
    cache = None
    for t in range(10):
        y, cache = fastmka_decode_step(cache, x[:, t : t + 1], proj, gp, DIMS, mode=mode)
        full, _ = fastmka_forward(x[:, : t + 1], proj, gp, DIMS, mode=mode)
        assert np.allclose(y[:, 0], full[:, -1], rtol=1e-12, atol=1e-13)
    assert cache.t_past == 10


def test_cache_supports_rollback():
    x, proj = model(6, s=5)
    gp = GateParams.init(DIMS.d_model, seed=6)
    _, prefix = fastmka_forward(x[:, :3], proj, gp, DIMS)
    a, branch = fastmka_decode_step(prefix, x[:, 3:4], proj, gp, DIMS)
    b, _ = fastmka_decode_step(prefix, x[:, 4:5], proj, gp, DIMS)
    assert prefix.t_past == 3 and branch.t_past == 4
    alt = np.concatenate([x[:, :3], x[:, 4:5]], axis=1)
    assert np.allclose(b[:, 0], fastmka_forward(alt, proj, gp, DIMS)[0][:, -1], rtol=1e-12)
    with pytest.raises(ValueError):
        prefix.k[0, 0, 0, 0] = 1.0


def test_decode_rejects_multi_token_step():
    x, proj = model(7, s=2)
    with pytest.raises(ValueError):
        fastmka_decode_step(None, x, proj, GateParams.init(DIMS.d_model), DIMS)


def test_cache_shape_mismatch():
    with pytest.raises(ValueError):
        KvCache(np.zeros((1, 2, 3, 4)), np.zeros((1, 2, 3, 5)))


def test_tier_ablation_l1_is_mha_and_missing_l3_is_dropped():
    x, proj = model(8, s=6)
    gp = GateParams.init(DIMS.d_model, seed=8, scale=0.5)
    only_l1, _ = tier_ablation(["L1"])(x, proj, gp, DIMS)
    assert np.allclose(only_l1, reference_causal_mha(x, proj, DIMS), rtol=1e-12, atol=1e-13)
    all_tiers, _ = fastmka_forward(x, proj, gp, DIMS)
    assert np.array_equal(tier_ablation(["L1", "L2"])(x, proj, gp, DIMS)[0], all_tiers)
    with pytest.raises(ValueError):
        tier_ablation([])
    with pytest.raises(ValueError):
        tier_ablation(["L4"])


def test_fastmka_with_store_uses_retrieval():
    x, proj = model(9, s=6)
    gp = GateParams.constant(DIMS.d_model, [0.0, 0.0, 1.0])
    hist = rng.normal(90, (2, 12, DIMS.d_model))
    store = chunk_store_from_sequence(hist[0], hist[1], 4, top_r=2)
    with_store, _ = fastmka_forward(x, proj, gp, DIMS, store=store, policy=TOP1)
    without, _ = fastmka_forward(x, proj, gp, DIMS, policy=TOP1)
    assert np.isfinite(with_store).all()
    assert not np.allclose(with_store, without)


# -- gated mixture -------------------------------------------------------------


def levels_for(seed, s=3, d=4, sizes=(2, 3, 1)):
    q = rng.normal(rng.derive(seed, 0), (s, d))
    lv = [(rng.normal(rng.derive(seed, 1, i), (n, d)), rng.normal(rng.derive(seed, 2, i), (n, d))) for i, n in enumerate(sizes)]
    return q, lv


def mixture_loops(q, levels, lam, tau):
    out = np.zeros((q.shape[0], levels[0][1].shape[1]))
    for i in range(q.shape[0]):
        num, den = 0.0, 0.0
        for l, (k, v) in enumerate(levels):
            for j in range(k.shape[0]):
                e = lam[l] * math.exp(tau * float(q[i] @ k[j]))
                num = num + e * v[j]
                den += e
        out[i] = num / den
    return out


@pytest.mark.parametrize("fn", [gated_mixture_direct, gated_mixture_recursive, gated_mixture_stable])
def test_mixture_matches_loops(fn):
    q, lv = levels_for(1)
    lam = np.array([0.5, 0.3, 0.2])
    assert np.allclose(fn(q, lv, lam), mixture_loops(q, lv, lam, 0.5), rtol=1e-13)


def test_level_permutation_invariance():
    q, lv = levels_for(2)
    lam = np.array([0.2, 0.5, 0.3])
    perm = [2, 0, 1]
    a = gated_mixture_stable(q, lv, lam)
    b = gated_mixture_stable(q, [lv[i] for i in perm], lam[perm])
    assert np.allclose(a, b, rtol=1e-14)


def test_one_key_returns_its_value():
    q = rng.normal(3, (4, 3))
    v = np.array([[1.5, -2.0, 0.25]])
    out = gated_mixture_stable(q, [(np.ones((1, 3)), v), (np.zeros((0, 3)), np.zeros((0, 3)))], [0.7, 0.3])
    assert np.allclose(out, np.repeat(v, 4, axis=0), rtol=1e-15)


def test_constant_values_pass_through():
    q, lv = levels_for(4)
    lv = [(k, np.full_like(v, 2.5)) for k, v in lv]
    assert np.allclose(gated_mixture_stable(q, lv, [0.1, 0.1, 0.8]), 2.5, rtol=1e-14)


def test_zero_weight_level_is_ignored():
    q, lv = levels_for(5)
    a = gated_mixture_stable(q, lv, [0.4, 0.6, 0.0])
    b = gated_mixture_stable(q, lv[:2], [0.4, 0.6])
    assert np.allclose(a, b, rtol=1e-14)


def test_degenerate_denominator():
    q, lv = levels_for(6)
    with pytest.raises(DegenerateDenominator):
        gated_mixture_stable(q, lv, [0.0, 0.0, 0.0])
    with pytest.raises(DegenerateDenominator):
        gated_mixture_stable(q, [(np.zeros((0, 4)), np.zeros((0, 4)))] + lv[1:], [1.0, 0.0, 0.0])
    with pytest.raises(ValueError):
        gated_mixture_stable(q, lv, [1.2, -0.1, -0.1])


def test_stable_mixture_survives_huge_scores_in_single():
    q = np.array([[30.0, 0.0]], dtype=np.float32)
    k = np.array([[4.0, 0.0], [3.9, 0.0]], dtype=np.float32)
    v = np.array([[1.0, 0.0], [0.0, 1.0]], dtype=np.float32)
    lv = [(k, v)]
    with np.errstate(over="ignore", invalid="ignore"):
        naive = gated_mixture_recursive(q, lv, [1.0], scale=1.0)
    stable = gated_mixture_stable(q, lv, [1.0], scale=1.0)
    assert not np.isfinite(naive).all()
    # weights e^120 : e^117 normalise to 1 / (1 + e^-3)
    p = 1 / (1 + math.exp(-3.0))
    assert np.allclose(stable, [[p, 1 - p]], rtol=1e-6)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 6), st.integers(1, 6))
def test_three_evaluations_agree(seed, s, d):
    q, lv = levels_for(seed, s, d, sizes=(3, 2, 4))
    lam = rng.uniform(seed, 3, 0.05, 1.0)
    lam /= lam.sum()
    a = gated_mixture_direct(q, lv, lam)
    for fn in (gated_mixture_recursive, gated_mixture_stable):
        assert np.abs(fn(q, lv, lam) - a).max() <= 1e-10 * np.abs(a).max()


def test_online_state_split_updates_equal_one_update():
    s = rng.normal(7, (3, 8)) * 5
    v = rng.normal(8, (8, 2))
    one = OnlineSoftmaxState(3, 2)
    one.update(s, v)
    two = OnlineSoftmaxState(3, 2)
    two.update(s[:, :5], v[:5])
    two.update(s[:, 5:], v[5:])
    assert np.allclose(one.result(), two.result(), rtol=1e-14)


# -- block engine ------------------------------------------------------------------


def qkv(seed, n=24, d=4):
    return tuple(rng.normal(rng.derive(seed, i), (n, d)) for i in range(3))


def test_block_global_matches_causal_loops():
    q, k, v = qkv(10)
    expected = naive_attention(q, k, v, lambda i, j: j <= i, 0.5)
    for b in (1, 5, 8, 24):
        assert np.allclose(block_mka(q, k, v, BlockPlan(24, b, pad=True)), expected, rtol=1e-12, atol=1e-14)


def test_block_local_matches_window_oracle():
    q, k, v = qkv(11)
    b, w = 4, 2
    visible = windowed_causal(lambda i: max(0, (i // b - w + 1) * b))
    out = block_mka(q, k, v, BlockPlan(24, b, mode="local", window=w))
    assert np.allclose(out, naive_attention(q, k, v, visible, 0.5), rtol=1e-12, atol=1e-14)


def test_block_recall_adds_chunk_keys():
    q, k, v = qkv(12, n=8)
    hist = rng.normal(13, (2, 6, 4))
    store = chunk_store_from_sequence(hist[0], hist[1], 3, top_r=8)
    out = block_mka(q, k, v, BlockPlan(8, 4), store)
    # with top_r above the chunk count every row recalls the whole history
    keys = np.concatenate([k, hist[0]])
    vals = np.concatenate([v, hist[1]])
    expected = naive_attention(q, keys, vals, lambda i, j: j <= i or j >= 8, 0.5)
    assert np.allclose(out, expected, rtol=1e-12, atol=1e-14)


def test_block_workers_and_tau():
    q, k, v = qkv(14, n=32)
    plan = BlockPlan(32, 4, tau=0.3)
    assert np.array_equal(block_mka(q, k, v, plan), block_mka(q, k, v, plan, workers=4))
    assert np.allclose(block_mka(q, k, v, plan), naive_attention(q, k, v, lambda i, j: j <= i, 0.3), rtol=1e-12)


def test_block_plan_validation():
    with pytest.raises(ValueError):
        BlockPlan(10, 4)
    with pytest.raises(ValueError):
        BlockPlan(8, 4, mode="local")
    with pytest.raises(ValueError):
        BlockPlan(8, 4, window=2)
    with pytest.raises(ValueError):
        BlockPlan(8, 4, tau=0.0)
    q, k, v = qkv(15, n=8)
    with pytest.raises(ValueError):
        block_mka(q, k, v, BlockPlan(8, 4, mode="local", window=1), ChunkStore(4))
    with pytest.raises(ValueError):
        block_mka(q, k, v, BlockPlan(16, 4))


def test_block_padding_leaves_real_rows_unchanged():
    q, k, v = qkv(16, n=10)
    padded = block_mka(q, k, v, BlockPlan(10, 4, pad=True))
    assert padded.shape == (10, 4)
    assert np.allclose(padded, naive_attention(q, k, v, lambda i, j: j <= i, 0.5), rtol=1e-12)
