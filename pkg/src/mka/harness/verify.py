"""Property suites run by ``mka verify``.

Every suite takes ``(seed, cfg)`` and returns a :class:`PropertyResult`. Suites
that touch the engines run in ``cfg.precision``; the mixture-equivalence and
gradient suites always run in double, the stability probe in
``cfg.stability.precision``.
"""

from __future__ import annotations

import math
import os
import tempfile
import time
import warnings
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .. import rng
from ..diffcheck import check_gate_backward, check_gated_mixture, fd_gradient
from ..engines import (
    BlockPlan,
    block_mka,
    block_mka_forward,
    fastmka_decode_step,
    fastmka_forward,
    gated_mixture_direct,
    gated_mixture_recursive,
    gated_mixture_stable,
    recursive_accumulators,
    reference_causal_mha,
    symbolic_mka_forward,
    tier_ablation,
)
from ..engines.dense import KvCache, ProjectionSet
from ..memory import ChunkStore, SummaryMode, build_levels, chunk_store_from_sequence
from ..routing import GateParams, RoutingPolicy, gate, topk_mask
from ..tensor import ModelDims, dtype_for, matmul, merge_heads, softmax_rows, split_heads
from . import oracles
from .config import RunConfig

L1_ONLY = RoutingPolicy("hard_topk", 1)
ENGINE_TOL = {"double": 1e-12, "single": 1e-6}
BLOCK_TOL = {"double": 1e-10, "single": 1e-6}


@dataclass
class PropertyResult:
    name: str
    instances: int
    worst_error: float
    tolerance: float
    passed: bool
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return (
            f"{flag}  {self.name:<28} n={self.instances:<5d} worst={self.worst_error:.3e} "
            f"tol={self.tolerance:.1e}  {self.detail}"
        )


def _gen(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(rng.derive(seed, *tags))


def normwise_rel(a: np.ndarray, b: np.ndarray) -> float:
    """``max|a - b| / max(max|a|, max|b|)`` with a 1e-300 floor."""
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-300)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def max_abs(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64)).max(initial=0.0))


# -- instance generators ----------------------------------------------------


def random_mixture_instance(g: np.random.Generator, max_s=8, max_d=8, max_keys=8):
    """Random queries, three levels (some possibly empty) and a strictly positive simplex gate."""
    s = int(g.integers(1, max_s + 1))
    d = int(g.integers(1, max_d + 1))
    sizes = g.integers(0, max_keys + 1, size=3)
    if not sizes.any():
        sizes[g.integers(0, 3)] = 1
    q = g.normal(size=(s, d))
    levels = [(g.normal(size=(n, d)), g.normal(size=(n, d))) for n in sizes]
    lam = g.dirichlet(np.ones(3)) if g.random() < 0.5 else g.dirichlet(np.ones(3), size=s)
    return q, levels, lam


def stability_instance(g: np.random.Generator, score_rms: float, dtype, s=8, d=8, n_keys=8):
    """Mixture instance whose raw scores ``q . k`` have root-mean-square magnitude ``score_rms``.

    Sizes are fixed rather than drawn: with only a handful of scores an RMS of
    80 often leaves every score under ln(FLT_MAX) ~ 88.72, where even the
    unshifted sum is finite in single precision.
    """
    sizes = [n_keys] * 3
    q = g.normal(size=(s, d))
    levels = [(g.normal(size=(n, d)), g.normal(size=(n, d))) for n in sizes]
    scores = np.concatenate([q @ k.T for k, _ in levels], axis=1)
    q *= score_rms / math.sqrt((scores**2).mean())
    lam = g.dirichlet(np.ones(3))
    cast = [(k.astype(dtype), v.astype(dtype)) for k, v in levels]
    return q.astype(dtype), cast, lam.astype(dtype)


def random_model(g: np.random.Generator, dtype, max_b=2, max_s=64, d_choices=(4, 8, 16, 32)):
    d_model = int(g.choice(d_choices))
    heads = [h for h in (1, 2, 4) if d_model % h == 0]
    dims = ModelDims(d_model, int(g.choice(heads)))
    b = int(g.integers(1, max_b + 1))
    s = int(g.integers(1, max_s + 1))
    x = g.normal(size=(b, s, d_model)).astype(dtype)
    proj = ProjectionSet.init(d_model, int(g.integers(2**32)), dtype)
    gp = GateParams(
        (g.normal(size=(d_model, 3)) * 0.5).astype(dtype), (g.normal(size=3) * 0.5).astype(dtype)
    )
    return dims, x, proj, gp


def _store_for(cfg: RunConfig, g: np.random.Generator, width: int, n_blocks: int | None = None) -> ChunkStore:
    """Chunk store of random history with ``retrieval.history_blocks`` chunks (may be empty)."""
    blocks = cfg.retrieval.history_blocks if n_blocks is None else n_blocks
    rows = 4
    store = ChunkStore(width, cfg.retrieval.h_bits, int(g.integers(2**32)), cfg.retrieval.top_r)
    if blocks:
        hist = g.normal(size=(blocks * rows, width))
        vals = g.normal(size=(blocks * rows, width))
        for i in range(blocks):
            sl = slice(i * rows, (i + 1) * rows)
            store.insert(hist[sl], vals[sl], (i * rows, (i + 1) * rows))
    return store


# -- tensor kernels ---------------------------------------------------------


def prop_tensor_kernels(seed: int, cfg: RunConfig) -> PropertyResult:
    """matmul vs triple loop, softmax row sums and shift invariance, head round-trip."""
    g = _gen(seed, 1)
    worst = 0.0
    ok = True
    n = 40
    for _ in range(n):
        m, k, p = (int(v) for v in g.integers(1, 33, size=3))
        a, b = g.normal(size=(m, k)), g.normal(size=(k, p))
        ref = np.zeros((m, p))
        for i in range(m):
            for j in range(p):
                acc = 0.0
                for t in range(k):
                    acc += a[i, t] * b[t, j]
                ref[i, j] = acc
        err = max_abs(matmul(a, b), ref)
        worst = max(worst, err)
        ok &= err < 1e-12
        s = g.normal(size=(m, p)) * 10
        sm = softmax_rows(s)
        ok &= bool((sm >= 0).all()) and max_abs(sm.sum(axis=1), 1.0) < 1e-12
        c = g.normal(size=(m, 1)) * 50
        ok &= max_abs(softmax_rows(s + c), sm) < 1e-6
        dims = ModelDims(8, int(g.choice([1, 2, 4, 8])))
        x = g.normal(size=(2, 3, 8))
        ok &= np.array_equal(merge_heads(split_heads(x, dims)), x)
    return PropertyResult("tensor_kernels", n, worst, 1e-12, bool(ok), "matmul/softmax/heads")


# -- memory hierarchy ---------------------------------------------------------


def prop_memory_levels(seed: int, cfg: RunConfig) -> PropertyResult:
    """Prefix mean vs brute force, m2 causality, EMA causality, empty-store zeros."""
    g = _gen(seed, 2)
    worst = 0.0
    ok = True
    n = 30
    for _ in range(n):
        b, s, d = int(g.integers(1, 3)), int(g.integers(1, 20)), int(g.integers(1, 9))
        x = g.normal(size=(b, s, d))
        lv = build_levels(x, SummaryMode())
        err = max_abs(lv.m2, oracles.brute_prefix_mean(x))
        worst = max(worst, err)
        ok &= err < 1e-12 and np.array_equal(lv.m1, x) and not lv.m3.any()
        t = int(g.integers(0, s))
        y = x.copy()
        y[:, t + 1 :] = g.normal(size=y[:, t + 1 :].shape)
        for mode in (SummaryMode(), SummaryMode("ema", 0.9)):
            ok &= np.array_equal(build_levels(x, mode).m2[:, : t + 1], build_levels(y, mode).m2[:, : t + 1])
        empty = ChunkStore(d)
        ok &= not build_levels(x, SummaryMode(), empty, x).m3.any()
    return PropertyResult("memory_levels", n, worst, 1e-12, bool(ok), "prefix mean/causality/empty L3")


def prop_retrieve_contract(seed: int, cfg: RunConfig) -> PropertyResult:
    """At most R results, no duplicates, deterministic signatures, ranking by Hamming then id."""
    g = _gen(seed, 3)
    ok = True
    n = 30
    for _ in range(n):
        d = int(g.integers(2, 17))
        store = _store_for(cfg, g, d, int(g.integers(0, 20)))
        q = g.normal(size=d)
        res = store.retrieve(q)
        ids = [c.chunk_id for c, _ in res]
        ok &= len(res) == min(store.top_r, len(store)) and len(set(ids)) == len(ids)
        keys = [(h, c.chunk_id) for c, h in res]
        ok &= keys == sorted(keys)
        twin = ChunkStore(d, store.h_bits, store.seed, store.top_r)
        ok &= np.array_equal(twin.signature(q), store.signature(q))
    return PropertyResult("retrieve_contract", n, 0.0, 0.0, bool(ok), "<=R, unique, ordered, deterministic")


def planted_needle_trial(trial_seed: int, n_distractors=64, d=32, h_bits=64, top_r=8, rows=4, cosine=0.985):
    """One planted-needle recall trial; returns (recalled, oracle index, planted index, target cosine)."""
    g = _gen(trial_seed, 8)
    q = g.normal(size=d)
    qn = q / np.linalg.norm(q)
    u = g.normal(size=d)
    u -= (u @ qn) * qn
    u /= np.linalg.norm(u)
    target = (cosine * qn + math.sqrt(1 - cosine**2) * u) * float(g.uniform(0.5, 2.0))
    store = ChunkStore(d, h_bits=h_bits, seed=int(g.integers(2**63)), top_r=top_r)
    planted = int(g.integers(0, n_distractors + 1))
    for i in range(n_distractors + 1):
        if i == planted:
            noise = g.normal(size=(rows, d)) * 0.1
            keys = target + noise - noise.mean(axis=0)
        else:
            keys = g.normal(size=d) + g.normal(size=(rows, d)) * 0.1
        store.insert(keys, g.normal(size=(rows, d)), (i * rows, (i + 1) * rows))
    centroids = np.stack([c.centroid for c in store.chunks])
    nn = oracles.exact_nearest(q, centroids)
    got = {c.chunk_id for c, _ in store.retrieve(q)}
    cos = float(centroids[planted] @ qn / np.linalg.norm(centroids[planted]))
    return nn in got, nn, planted, cos


def prop_retrieval_recall(seed: int, cfg: RunConfig, trials: int = 200) -> PropertyResult:
    hits = 0
    min_cos = 1.0
    oracle_agrees = True
    for t in range(trials):
        hit, nn, planted, cos = planted_needle_trial(rng.derive(seed, 9, t), top_r=8, h_bits=64)
        hits += hit
        min_cos = min(min_cos, cos)
        oracle_agrees &= nn == planted
    recall = hits / trials
    ok = recall >= 0.95 and min_cos >= 0.98 and oracle_agrees
    return PropertyResult(
        "retrieval_recall", trials, 1.0 - recall, 0.05, bool(ok),
        f"recall={recall:.3f} min_cos={min_cos:.4f} R=8 h_bits=64",
    )


def prop_snapshot_roundtrip(seed: int, cfg: RunConfig) -> PropertyResult:
    g = _gen(seed, 10)
    ok = True
    n = 5
    with tempfile.TemporaryDirectory() as tmp:
        for i in range(n):
            d = int(g.integers(1, 17))
            store = _store_for(cfg, g, d, int(g.integers(0, 12)))
            a, b = os.path.join(tmp, f"a{i}.bin"), os.path.join(tmp, f"b{i}.bin")
            store.save(a)
            loaded = ChunkStore.load(a, top_r=store.top_r)
            loaded.save(b)
            with open(a, "rb") as fa, open(b, "rb") as fb:
                ok &= fa.read() == fb.read()
            for c0, c1 in zip(store.chunks, loaded.chunks):
                ok &= c0.chunk_id == c1.chunk_id and c0.token_range == c1.token_range
                for f in ("centroid", "keys", "values", "signature"):
                    ok &= np.array_equal(getattr(c0, f), getattr(c1, f))
            for _ in range(5):
                q = g.normal(size=d)
                before = [(c.chunk_id, h) for c, h in store.retrieve(q)]
                after = [(c.chunk_id, h) for c, h in loaded.retrieve(q)]
                ok &= before == after
    return PropertyResult("snapshot_roundtrip", n, 0.0, 0.0, bool(ok), "bytes and retrieval identical")


# -- routing ------------------------------------------------------------------


def prop_routing(seed: int, cfg: RunConfig) -> PropertyResult:
    g = _gen(seed, 4)
    worst = 0.0
    ok = True
    n = 50
    policies = [RoutingPolicy(), RoutingPolicy("fixed_uniform"), RoutingPolicy("hard_topk", 1), RoutingPolicy("hard_topk", 2)]
    for _ in range(n):
        d = int(g.integers(1, 9))
        q = g.normal(size=(2, 5, d)) * 3
        gp = GateParams(g.normal(size=(d, 3)), g.normal(size=3))
        for pol in policies:
            lam = gate(q, gp, pol)
            err = max_abs(lam.sum(axis=-1), 1.0)
            worst = max(worst, err)
            ok &= bool((lam >= 0).all()) and err < 1e-6
        ok &= bool(((gate(q, gp, RoutingPolicy("hard_topk", 2)) == 0).sum(axis=-1) == 1).all())
        shifted = GateParams(gp.w, gp.b + g.normal() * 10)
        ok &= np.array_equal(gate(q, gp).argmax(-1), gate(q, shifted).argmax(-1))
        uni = RoutingPolicy("fixed_uniform")
        ok &= np.array_equal(gate(q, gp, uni), gate(q + g.normal(size=q.shape), gp, uni))
    return PropertyResult("routing_simplex", n, worst, 1e-6, bool(ok), "all policies on simplex")


# -- attention engines ----------------------------------------------------------


def prop_mixture_equivalence(seed: int, cfg: RunConfig, instances: int = 1000) -> PropertyResult:
    """Direct, recursive and stable gated-mixture evaluations agree pairwise (double)."""
    g = _gen(seed, 5)
    worst = 0.0
    for _ in range(instances):
        q, levels, lam = random_mixture_instance(g)
        a = gated_mixture_direct(q, levels, lam)
        b = gated_mixture_recursive(q, levels, lam)
        c = gated_mixture_stable(q, levels, lam)
        worst = max(worst, normwise_rel(a, b), normwise_rel(a, c), normwise_rel(b, c))
    return PropertyResult("mixture_equivalence", instances, worst, 1e-10, worst < 1e-10, "direct/recursive/stable, double")


def prop_stability(seed: int, cfg: RunConfig) -> PropertyResult:
    """Stable scan stays finite where the unshifted recursion overflows."""
    st = cfg.stability
    dtype = dtype_for(st.precision)
    g = _gen(seed, 6)
    stable_finite = 0
    naive_overflow = 0
    with warnings.catch_warnings(), np.errstate(over="ignore", invalid="ignore"):
        warnings.simplefilter("ignore", RuntimeWarning)
        for _ in range(st.instances):
            q, levels, lam = stability_instance(g, st.score_rms, dtype)
            out = gated_mixture_stable(q, levels, lam, scale=1.0)
            stable_finite += bool(np.isfinite(out).all())
            alpha, z = recursive_accumulators(q, levels, lam, scale=1.0)
            naive_overflow += not (np.isfinite(alpha).all() and np.isfinite(z).all())
    n = st.instances
    ok = stable_finite == n and naive_overflow >= math.ceil(0.99 * n)
    return PropertyResult(
        "stability_max_shift", n, 1.0 - stable_finite / n, 0.0, ok,
        f"{st.precision}, score rms {st.score_rms:g}: stable finite {stable_finite}/{n}, "
        f"naive non-finite {naive_overflow}/{n}",
    )


def prop_collapse_chain(seed: int, cfg: RunConfig, instances: int = 20) -> PropertyResult:
    """Gate pinned to L1 makes symbolic MKA, FastMKA and block_mka equal causal MHA."""
    dtype = dtype_for(cfg.precision)
    tol = ENGINE_TOL[cfg.precision]
    g = _gen(seed, 7)
    worst = 0.0
    for i in range(instances):
        dims, x, proj, _ = random_model(g, dtype)
        l1 = GateParams.constant(dims.d_model, [1.0, 0.0, 0.0], dtype)
        ref = reference_causal_mha(x, proj, dims)
        sym, _ = symbolic_mka_forward(x, proj, l1, dims, policy=L1_ONLY)
        fast, _ = fastmka_forward(x, proj, l1, dims, policy=L1_ONLY)
        only_l1, _ = tier_ablation(["L1"])(x, proj, GateParams.init(dims.d_model, i, dtype=dtype), dims)
        errs = [max_abs(sym, ref), max_abs(fast, ref), max_abs(only_l1, ref)]
        s = x.shape[1]
        for b_blk in (1, 2, 4, 8, 16, 64):
            plan = BlockPlan(s, b_blk, pad=True)
            errs.append(max_abs(block_mka_forward(x, proj, dims, plan), ref))
        if i < 5:
            errs.append(max_abs(ref, oracles.naive_causal_mha(x.astype(np.float64), proj.astype(np.float64), dims)) if cfg.precision == "double" else 0.0)
        worst = max(worst, *errs)
    return PropertyResult("collapse_chain", instances, worst, tol, worst <= tol, f"{cfg.precision}, B<=2 S<=64 D<=32")


def _causal_engines(cfg: RunConfig, g: np.random.Generator, dims: ModelDims, dtype):
    """(name, fn(x) -> output[B, S, D]) for every causal engine under this config."""
    proj = ProjectionSet.init(dims.d_model, int(g.integers(2**32)), dtype)
    gp = GateParams((g.normal(size=(dims.d_model, 3))).astype(dtype), g.normal(size=3).astype(dtype))
    store = _store_for(cfg, g, dims.d_model, max(cfg.retrieval.history_blocks, 4))
    head_store = _store_for(cfg, g, dims.d_head, max(cfg.retrieval.history_blocks, 4))
    ema = SummaryMode("ema", 0.8)
    return [
        ("mha", lambda x: reference_causal_mha(x, proj, dims)),
        ("symbolic_mka", lambda x: symbolic_mka_forward(x, proj, gp, dims)[0]),
        ("symbolic_mka+L3", lambda x: symbolic_mka_forward(x, proj, gp, dims, ema, store)[0]),
        ("fastmka", lambda x: fastmka_forward(x, proj, gp, dims)[0]),
        ("fastmka+L3", lambda x: fastmka_forward(x, proj, gp, dims, ema, store)[0]),
        ("block_mka_local", lambda x: block_mka_forward(x, proj, dims, BlockPlan(x.shape[1], 4, mode="local", window=2, pad=True))),
        ("block_mka_global+L3", lambda x: block_mka_forward(x, proj, dims, BlockPlan(x.shape[1], 4, pad=True), head_store)),
    ]


def prop_causality(seed: int, cfg: RunConfig, trials: int = 200) -> PropertyResult:
    """Changing tokens after ``t`` never changes any output at or before ``t`` (exact)."""
    dtype = dtype_for(cfg.precision)
    g = _gen(seed, 11)
    failures = []
    per_engine = 0
    for trial in range(trials):
        dims = ModelDims(8, 2)
        engines = _causal_engines(cfg, g, dims, dtype)
        s = int(g.integers(2, 25))
        x = g.normal(size=(int(g.integers(1, 3)), s, dims.d_model)).astype(dtype)
        t = int(g.integers(0, s - 1))
        y = x.copy()
        y[:, t + 1 :] = g.normal(size=y[:, t + 1 :].shape).astype(dtype)
        for name, fn in engines:
            if not np.array_equal(fn(x)[:, : t + 1], fn(y)[:, : t + 1]):
                failures.append(f"{name}@trial{trial}")
        per_engine = len(engines)
    detail = f"{per_engine} engines" + (f"; leaks: {failures[:5]}" if failures else "")
    return PropertyResult("causality", trials, float(len(failures)), 0.0, not failures, detail)


def prop_block_invariance(seed: int, cfg: RunConfig, instances: int = 20) -> PropertyResult:
    """block_mka is invariant to the block size and matches dense causal attention; local window is exact."""
    dtype = dtype_for(cfg.precision)
    tol = BLOCK_TOL[cfg.precision]
    g = _gen(seed, 12)
    worst = 0.0
    ok = True
    n = 64
    for i in range(instances):
        d = int(g.integers(1, 9))
        q, k, v = (g.normal(size=(n, d)).astype(dtype) for _ in range(3))
        outs = [block_mka(q, k, v, BlockPlan(n, b)) for b in (2, 4, 8, 16)]
        for a in outs[1:]:
            worst = max(worst, max_abs(outs[0], a))
        if i < 3:
            dense = oracles.naive_attention(q, k, v, lambda r, c: c <= r, 1 / math.sqrt(d))
            worst = max(worst, max_abs(outs[0], dense))
        ok &= np.array_equal(outs[1], block_mka(q, k, v, BlockPlan(n, 4), workers=4))
        b_blk, window = 8, 2
        local = BlockPlan(n, b_blk, mode="local", window=window)
        base = block_mka(q, k, v, local)
        blk = int(g.integers(window, n // b_blk))
        first = (blk - window + 1) * b_blk
        k2, v2 = k.copy(), v.copy()
        k2[:first] = g.normal(size=(first, d))
        v2[:first] = g.normal(size=(first, d))
        rows = slice(blk * b_blk, (blk + 1) * b_blk)
        ok &= np.array_equal(base[rows], block_mka(q, k2, v2, local)[rows])
    ok &= worst <= tol
    return PropertyResult("block_invariance", instances, worst, tol, bool(ok), "B_blk in {2,4,8,16}, N=64; window; threads")


def prop_decode_consistency(seed: int, cfg: RunConfig, seq_len: int = 64) -> PropertyResult:
    """Step-by-step decoding reproduces the last output of a full recompute at every length."""
    dtype = dtype_for(cfg.precision)
    tol = ENGINE_TOL[cfg.precision]
    g = _gen(seed, 13)
    dims = ModelDims(16, 4)
    proj = ProjectionSet.init(16, int(g.integers(2**32)), dtype)
    gp = GateParams(g.normal(size=(16, 3)).astype(dtype), g.normal(size=3).astype(dtype))
    store = _store_for(cfg, g, 16, max(cfg.retrieval.history_blocks, 4))
    worst = 0.0
    ok = True
    for mode, st in ((SummaryMode(), None), (SummaryMode("ema", 0.7), store)):
        x = g.normal(size=(2, seq_len, 16)).astype(dtype)
        cache = None
        for s in range(1, seq_len + 1):
            prev = cache
            prev_k = None if prev is None else prev.k.copy()
            o_t, cache = fastmka_decode_step(cache, x[:, s - 1 : s], proj, gp, dims, mode=mode, store=st)
            full, full_cache = fastmka_forward(x[:, :s], proj, gp, dims, mode, st)
            worst = max(worst, max_abs(o_t[:, 0], full[:, -1]), max_abs(cache.k, full_cache.k))
            ok &= cache.t_past == s
            if prev is not None:
                # append-only: earlier entries unchanged and the old cache still intact
                ok &= np.array_equal(cache.k[:, :, : s - 1], prev_k) and np.array_equal(prev.k, prev_k)
    ok &= worst <= tol
    return PropertyResult("decode_consistency", seq_len, worst, tol, bool(ok), f"S=1..{seq_len}, prefix_mean and ema+L3")


def prop_tier_ablation(seed: int, cfg: RunConfig, instances: int = 10) -> PropertyResult:
    dtype = dtype_for(cfg.precision)
    g = _gen(seed, 14)
    worst = 0.0
    ok = True
    for _ in range(instances):
        dims, x, proj, gp = random_model(g, dtype, max_s=24)
        ref = reference_causal_mha(x, proj, dims)
        l1, _ = tier_ablation(["L1"])(x, proj, gp, dims)
        ok &= np.array_equal(l1, ref)
        l12, _ = tier_ablation(["L1", "L2"])(x, proj, gp, dims)
        no_retrieval, _ = fastmka_forward(x, proj, gp, dims)
        ok &= np.array_equal(l12, no_retrieval)
        empty = ChunkStore(dims.d_model)
        l13, _ = tier_ablation(["L1", "L3"])(x, proj, gp, dims, store=empty)
        ok &= np.array_equal(l13, ref)
        worst = max(worst, max_abs(l1, ref), max_abs(l13, ref))
    return PropertyResult("tier_ablation", instances, worst, 0.0, bool(ok), "{L1}=MHA, {L1,L2}=no retrieval, {L1,L3}+empty={L1}")


# -- gradients ------------------------------------------------------------------


def prop_gradients(seed: int, cfg: RunConfig, instances: int = 100) -> PropertyResult:
    worst = 0.0
    ok = True
    for i in range(instances):
        s = rng.derive(seed, 15, i)
        g = _gen(s, 0)
        r1 = check_gated_mixture(s, int(g.integers(1, 5)), int(g.integers(1, 5)), int(g.integers(1, 4)))
        r2 = check_gate_backward(s, int(g.integers(1, 3)), int(g.integers(1, 5)), int(g.integers(1, 7)))
        worst = max(worst, r1.max_rel_err, r2.max_rel_err)
        ok &= r1.ok and r2.ok
    ok &= worst < 1e-4
    return PropertyResult("gradient_checks", instances, worst, 1e-4, bool(ok), "mixture (q, logits, values) and gate (q, w, b); h=1e-5")


def prop_fd_self_consistency(seed: int, cfg: RunConfig) -> PropertyResult:
    """Halving the step changes central differences by O(h^2) on a smooth function."""
    g = _gen(seed, 16)
    x0 = g.normal(size=6)

    def f(x):
        return float(np.sin(x).sum() + 0.1 * (x**3).sum())

    h = 1e-2
    exact = np.cos(x0) + 0.3 * x0**2
    e1 = np.abs(fd_gradient(f, x0, h) - exact).max()
    e2 = np.abs(fd_gradient(f, x0, h / 2) - exact).max()
    ratio = e1 / e2
    ok = 3.0 < ratio < 5.0
    return PropertyResult("fd_self_consistency", 1, float(e2), 0.0, bool(ok), f"error ratio at h, h/2 = {ratio:.2f} (expect 4)")


PROPERTIES: dict[str, Callable[[int, RunConfig], PropertyResult]] = {
    "tensor_kernels": prop_tensor_kernels,
    "memory_levels": prop_memory_levels,
    "retrieve_contract": prop_retrieve_contract,
    "retrieval_recall": prop_retrieval_recall,
    "snapshot_roundtrip": prop_snapshot_roundtrip,
    "routing_simplex": prop_routing,
    "mixture_equivalence": prop_mixture_equivalence,
    "stability_max_shift": prop_stability,
    "collapse_chain": prop_collapse_chain,
    "causality": prop_causality,
    "block_invariance": prop_block_invariance,
    "decode_consistency": prop_decode_consistency,
    "tier_ablation": prop_tier_ablation,
    "gradient_checks": prop_gradients,
    "fd_self_consistency": prop_fd_self_consistency,
}


def verify(cfg: RunConfig, only: list[str] | None = None, log: Callable[[str], None] | None = None) -> list[PropertyResult]:
    results = []
    for name, fn in PROPERTIES.items():
        if only and name not in only:
            continue
        t0 = time.perf_counter()
        res = fn(cfg.seed, cfg)
        res.seconds = time.perf_counter() - t0
        results.append(res)
        if log:
            log(res.line())
    return results


def results_json(cfg: RunConfig, results: list[PropertyResult]) -> dict:
    return {
        "passed": all(r.passed for r in results),
        "seed": cfg.seed,
        "precision": cfg.precision,
        "config": cfg.to_dict(),
        "properties": [asdict(r) for r in results],
    }
