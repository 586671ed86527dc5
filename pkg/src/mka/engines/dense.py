"""Multi-head engines over ``[B, S, D]`` token streams.

* :func:`reference_causal_mha` - plain causal multi-head attention.
* :func:`symbolic_mka_forward` - one attention per memory level, mixed by the gate.
* :func:`fastmka_forward` - levels fused per token before a single K/V projection,
  with the fused keys/values kept in an append-only cache.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np

from .. import rng
from ..memory import ChunkStore, SummaryMode, SummaryState, build_levels, retrieval_rows, summarize
from ..routing import LEARNED_SOFT, GateParams, RoutingPolicy, gate
from ..tensor import DimensionError, ModelDims, matmul, merge_heads, softmax_rows, split_heads

TIERS = ("L1", "L2", "L3")


@dataclass(frozen=True)
class ProjectionSet:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray

    def __post_init__(self):
        d = self.w_q.shape[0]
        for name in ("w_q", "w_k", "w_v", "w_o"):
            w = getattr(self, name)
            if w.shape != (d, d):
                raise DimensionError(f"{name} must be [{d}, {d}], got {w.shape}")
            if not np.isfinite(w).all():
                raise ValueError(f"{name} has non-finite entries")

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @classmethod
    def init(cls, d_model: int, seed: int = 0, dtype=np.float64) -> "ProjectionSet":
        std = 1.0 / math.sqrt(d_model)
        mats = [
            (rng.normal(rng.derive(seed, i), (d_model, d_model)) * std).astype(dtype)
            for i in range(4)
        ]
        return cls(*mats)

    def astype(self, dtype) -> "ProjectionSet":
        return ProjectionSet(*(w.astype(dtype) for w in (self.w_q, self.w_k, self.w_v, self.w_o)))


@dataclass(frozen=True)
class KvCache:
    """Per-head keys/values ``[B, H, T, d_h]``.

    FastMKA stores fused keys/values plus the summary carry-over needed to
    extend L2 past the cached prefix. The arrays are read-only; appending
    returns a new cache and leaves this one valid.
    """

    k: np.ndarray
    v: np.ndarray
    summary: Optional[SummaryState] = None

    def __post_init__(self):
        if self.k.shape != self.v.shape or self.k.ndim != 4:
            raise DimensionError(f"cache keys/values must share a [B, H, T, d_h] shape, got {self.k.shape}, {self.v.shape}")
        self.k.flags.writeable = False
        self.v.flags.writeable = False

    @property
    def t_past(self) -> int:
        return self.k.shape[2]

    def append(self, k: np.ndarray, v: np.ndarray, summary: Optional[SummaryState] = None) -> "KvCache":
        if k.shape[:2] != self.k.shape[:2] or k.shape[3] != self.k.shape[3]:
            raise DimensionError(f"cache holds {self.k.shape}, cannot append {k.shape}")
        return KvCache(np.concatenate([self.k, k], axis=2), np.concatenate([self.v, v], axis=2), summary)


FusedKvCache = KvCache


def head_scale(dims: ModelDims, scale: Optional[float]) -> float:
    return 1.0 / math.sqrt(dims.d_head) if scale is None else scale


def causal_attention(q_h: np.ndarray, k_h: np.ndarray, v_h: np.ndarray, scale: float, offset: int = 0) -> np.ndarray:
    """Causal softmax attention per ``(batch, head)``.

    ``q_h`` is ``[B, H, S, d_h]`` at absolute positions ``offset..offset+S-1``;
    ``k_h``/``v_h`` are ``[B, H, T, d_h]`` at positions ``0..T-1``.
    """
    b, h, s, _ = q_h.shape
    t = k_h.shape[2]
    if k_h.shape[:2] != (b, h) or v_h.shape[:3] != k_h.shape[:3]:
        raise DimensionError(f"attention shapes disagree: q {q_h.shape}, k {k_h.shape}, v {v_h.shape}")
    dtype = q_h.dtype
    bias = np.where(np.arange(t)[None, :] <= np.arange(offset, offset + s)[:, None], 0.0, -np.inf).astype(dtype)
    tau = dtype.type(scale)
    out = np.empty(q_h.shape[:3] + (v_h.shape[3],), dtype=dtype)
    # one (batch, head) slice at a time bounds the score buffer to S x T
    for bi in range(b):
        for hi in range(h):
            scores = matmul(q_h[bi, hi], k_h[bi, hi].T)
            scores *= tau
            scores += bias
            out[bi, hi] = matmul(softmax_rows(scores), v_h[bi, hi])
    return out


def _check_input(x: np.ndarray, dims: ModelDims, proj: ProjectionSet) -> None:
    if x.ndim != 3:
        raise DimensionError(f"expected [B, S, D] input, got {x.shape}")
    if x.shape[1] == 0:
        raise DimensionError("input sequence is empty")
    if x.shape[2] != dims.d_model or proj.d_model != dims.d_model:
        raise DimensionError(f"width mismatch: input {x.shape[2]}, dims {dims.d_model}, projections {proj.d_model}")


def reference_causal_mha(x: np.ndarray, proj: ProjectionSet, dims: ModelDims, scale: Optional[float] = None) -> np.ndarray:
    _check_input(x, dims, proj)
    q_h = split_heads(matmul(x, proj.w_q), dims)
    k_h = split_heads(matmul(x, proj.w_k), dims)
    v_h = split_heads(matmul(x, proj.w_v), dims)
    a = causal_attention(q_h, k_h, v_h, head_scale(dims, scale))
    return matmul(merge_heads(a), proj.w_o)


def symbolic_mka_forward(
    x: np.ndarray,
    proj: ProjectionSet,
    gate_params: GateParams,
    dims: ModelDims,
    mode: SummaryMode = SummaryMode(),
    store: Optional[ChunkStore] = None,
    policy: RoutingPolicy = LEARNED_SOFT,
    scale: Optional[float] = None,
) -> tuple[np.ndarray, KvCache]:
    """Per-level causal attentions mixed by the gate; the cache keeps only L1 keys/values.

    Every level is causally masked, including L3: its rows are retrieved with
    per-token queries, so row ``t'`` carries information from token ``t'``.
    """
    _check_input(x, dims, proj)
    q = matmul(x, proj.w_q)
    q_h = split_heads(q, dims)
    lam = gate(q, gate_params, policy)
    levels = build_levels(x, mode, store, q if store is not None else None)
    tau = head_scale(dims, scale)
    mixed = None
    cache = None
    for i, m in enumerate(levels):
        k_h = split_heads(matmul(m, proj.w_k), dims)
        v_h = split_heads(matmul(m, proj.w_v), dims)
        a = causal_attention(q_h, k_h, v_h, tau)
        term = lam[:, None, :, i, None] * a
        mixed = term if mixed is None else mixed + term
        if i == 0:
            cache = KvCache(k_h, v_h)
    return matmul(merge_heads(mixed), proj.w_o), cache


def fuse_levels(
    x: np.ndarray,
    m2: np.ndarray,
    m3: Optional[np.ndarray],
    lam: np.ndarray,
    tiers: Iterable[str] = TIERS,
) -> np.ndarray:
    """Per-token weighted sum of the active tiers.

    ``m3=None`` marks L3 as absent. Absent or excluded tiers are dropped and the
    gate weights renormalised over the rest; a token whose kept weights are all
    zero falls back to a uniform blend of the kept tiers.
    """
    kept = [i for i, name in enumerate(TIERS) if name in set(tiers) and (i < 2 or m3 is not None)]
    if not kept:
        raise ValueError("no memory tier left to fuse")
    sources = (x, m2, m3)
    w = lam[..., kept]
    if len(kept) < len(TIERS):
        total = w.sum(axis=-1, keepdims=True)
        w = np.where(total > 0, w / np.where(total > 0, total, 1), 1.0 / len(kept))
    fused = w[..., 0, None] * sources[kept[0]]
    for j, i in enumerate(kept[1:], start=1):
        fused = fused + w[..., j, None] * sources[i]
    return fused


def fastmka_forward(
    x: np.ndarray,
    proj: ProjectionSet,
    gate_params: GateParams,
    dims: ModelDims,
    mode: SummaryMode = SummaryMode(),
    store: Optional[ChunkStore] = None,
    cache: Optional[KvCache] = None,
    policy: RoutingPolicy = LEARNED_SOFT,
    scale: Optional[float] = None,
    tiers: Iterable[str] = TIERS,
) -> tuple[np.ndarray, KvCache]:
    """Route-fused attention: one K/V projection of the fused tokens and one causal pass.

    With ``cache`` the new tokens continue the cached sequence: L2 resumes from
    the cached summary state and queries attend the cached fused keys too. L3
    takes part only when ``store`` holds at least one chunk.
    """
    _check_input(x, dims, proj)
    b = x.shape[0]
    if cache is not None:
        k_shape = cache.k.shape
        if k_shape[0] != b or k_shape[1] != dims.n_heads or k_shape[3] != dims.d_head:
            raise DimensionError(f"cache shape {k_shape} does not fit batch {b} and dims {dims}")
        if cache.summary is None or cache.summary.total.shape != (b, dims.d_model):
            raise DimensionError("cache carries no summary state for this batch/width")
    if store is not None and store.d != dims.d_model:
        raise DimensionError(f"chunk store width {store.d} != model width {dims.d_model}")
    q = matmul(x, proj.w_q)
    lam = gate(q, gate_params, policy)
    m2, summary = summarize(x, mode, None if cache is None else cache.summary)
    m3 = retrieval_rows(store, q) if store is not None and len(store) else None
    fused = fuse_levels(x, m2, m3, lam, tiers)
    k_h = split_heads(matmul(fused, proj.w_k), dims)
    v_h = split_heads(matmul(fused, proj.w_v), dims)
    if cache is None:
        new_cache = KvCache(k_h, v_h, summary)
        offset = 0
    else:
        new_cache = cache.append(k_h, v_h, summary)
        offset = cache.t_past
    a = causal_attention(split_heads(q, dims), new_cache.k, new_cache.v, head_scale(dims, scale), offset)
    return matmul(merge_heads(a), proj.w_o), new_cache


def fastmka_decode_step(
    cache: Optional[KvCache],
    x_t: np.ndarray,
    proj: ProjectionSet,
    gate_params: GateParams,
    dims: ModelDims,
    **kwargs,
) -> tuple[np.ndarray, KvCache]:
    """Advance a FastMKA cache by exactly one token ``x_t`` ([B, 1, D])."""
    if x_t.ndim != 3 or x_t.shape[1] != 1:
        raise DimensionError(f"decode step expects [B, 1, D], got {x_t.shape}")
    return fastmka_forward(x_t, proj, gate_params, dims, cache=cache, **kwargs)


def tier_ablation(tiers: Iterable[str]) -> Callable[..., tuple[np.ndarray, KvCache]]:
    """FastMKA restricted to ``tiers`` (subset of L1/L2/L3), weights renormalised over them."""
    chosen = frozenset(tiers)
    if not chosen:
        raise ValueError("tier ablation needs at least one tier")
    unknown = chosen - set(TIERS)
    if unknown:
        raise ValueError(f"unknown tiers {sorted(unknown)}")
    return functools.partial(fastmka_forward, tiers=tuple(t for t in TIERS if t in chosen))
