"""Tiled causal attention with online softmax and optional chunk recall."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..memory import ChunkStore
from ..tensor import DimensionError, ModelDims, matmul, merge_heads, split_heads
from .mixture import OnlineSoftmaxState

BLOCK_MODES = ("local", "global")


@dataclass(frozen=True)
class BlockPlan:
    """Tiling of an ``n``-row sequence into blocks of ``b_blk`` rows.

    ``local`` mode lets a query block see only the ``window`` most recent key
    blocks (its own included); ``global`` mode sees every earlier block and may
    add recalled chunks from a store. With ``pad`` the sequence is right-padded
    to a whole number of blocks.
    """

    n: int
    b_blk: int
    tau: Optional[float] = None
    mode: str = "global"
    window: Optional[int] = None
    pad: bool = False

    def __post_init__(self):
        if self.n <= 0 or self.b_blk <= 0:
            raise ValueError(f"n and b_blk must be positive, got n={self.n}, b_blk={self.b_blk}")
        if self.tau is not None and not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.mode not in BLOCK_MODES:
            raise ValueError(f"mode must be one of {BLOCK_MODES}, got {self.mode!r}")
        if self.mode == "local":
            if self.window is None or self.window < 1:
                raise ValueError("local mode needs window >= 1 (in blocks)")
        elif self.window is not None:
            raise ValueError("window is only meaningful in local mode")
        if self.n % self.b_blk and not self.pad:
            raise ValueError(f"n={self.n} is not divisible by b_blk={self.b_blk}; enable pad")

    @property
    def t_blocks(self) -> int:
        return -(-self.n // self.b_blk)

    def scale(self, d: int) -> float:
        return 1.0 / math.sqrt(d) if self.tau is None else self.tau

    def first_block(self, i: int) -> int:
        return 0 if self.mode == "global" else max(0, i - self.window + 1)


class _RecallBank:
    """Store snapshot padded to ``[n_chunks, c_max, d]`` so rows can gather their own chunks."""

    def __init__(self, store: ChunkStore, dtype):
        self.store = store
        chunks = store.chunks
        c_max = max(c.keys.shape[0] for c in chunks)
        n, d = len(chunks), store.d
        self.keys = np.zeros((n, c_max, d), dtype=dtype)
        self.values = np.zeros((n, c_max, d), dtype=dtype)
        self.bias = np.full((n, c_max), -np.inf, dtype=dtype)
        for i, c in enumerate(chunks):
            rows = c.keys.shape[0]
            self.keys[i, :rows] = c.keys
            self.values[i, :rows] = c.values
            self.bias[i, :rows] = 0.0

    def gather(self, q_blk: np.ndarray):
        """Per-row ``(keys [rows, n, d], values [rows, n, d], bias [rows, n])`` in rank order."""
        idx, _, _ = self.store.rank(q_blk)
        rows = q_blk.shape[0]
        keys = self.keys[idx].reshape(rows, -1, self.keys.shape[2])
        values = self.values[idx].reshape(rows, -1, self.values.shape[2])
        return keys, values, self.bias[idx].reshape(rows, -1)


def block_mka(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    plan: BlockPlan,
    store: Optional[ChunkStore] = None,
    workers: int = 1,
) -> np.ndarray:
    """Blockwise causal attention of ``q``/``k``/``v`` ([N, d]) under ``plan``.

    Each query block keeps an :class:`OnlineSoftmaxState` across its key
    blocks (intra-block causal mask on the diagonal). In global mode each
    row recalls chunks with its own query, and their keys/values join the same
    state unweighted before normalisation. Query blocks are independent;
    ``workers > 1`` runs them on a thread pool with identical results.
    """
    q, k, v = (np.asarray(a) for a in (q, k, v))
    if q.ndim != 2 or k.shape != q.shape or v.ndim != 2 or v.shape[0] != q.shape[0]:
        raise DimensionError(f"block_mka needs q, k [N, d] and v [N, d_v], got {q.shape}, {k.shape}, {v.shape}")
    n, d = q.shape
    if n != plan.n:
        raise DimensionError(f"plan is for n={plan.n} rows, got {n}")
    if store is not None:
        if plan.mode != "global":
            raise ValueError("chunk recall is only available in global mode")
        if store.d != d or store.d != v.shape[1]:
            raise DimensionError(f"chunk store width {store.d} != attention width {d}")
    bsz = plan.b_blk
    t_blocks = plan.t_blocks
    padded = t_blocks * bsz
    if padded != n:
        # pad rows sit after every real query, so the causal mask already hides them
        q, k, v = (np.concatenate([a, np.zeros((padded - n, a.shape[1]), a.dtype)]) for a in (q, k, v))
    tau = q.dtype.type(plan.scale(d))
    diag = np.where(np.arange(bsz)[None, :] <= np.arange(bsz)[:, None], 0.0, -np.inf).astype(q.dtype)
    out = np.empty((padded, v.shape[1]), dtype=q.dtype)
    bank = _RecallBank(store, q.dtype) if store is not None and len(store) and store.top_r else None

    def run(i: int) -> None:
        rows = slice(i * bsz, (i + 1) * bsz)
        q_i = q[rows]
        state = OnlineSoftmaxState(bsz, v.shape[1], dtype=q.dtype)
        for j in range(plan.first_block(i), i + 1):
            cols = slice(j * bsz, (j + 1) * bsz)
            s = matmul(q_i, k[cols].T)
            s *= tau
            if j == i:
                s += diag
            state.update(s, v[cols])
        if bank is not None:
            rk, rv, bias = bank.gather(q_i)
            # batched per-row products keep each row's arithmetic independent of its neighbours
            scores = np.matmul(q_i[:, None, :], rk.transpose(0, 2, 1))[:, 0, :]
            scores *= tau
            scores += bias
            state.update(scores, rv)
        out[rows] = state.result()

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, range(t_blocks)))
    else:
        for i in range(t_blocks):
            run(i)
    return out[:n]


def block_mka_forward(
    x: np.ndarray,
    proj,
    dims: ModelDims,
    plan: BlockPlan,
    store: Optional[ChunkStore] = None,
    workers: int = 1,
) -> np.ndarray:
    """Multi-head wrapper: project ``x`` ([B, S, D]), run :func:`block_mka` per head, project out.

    ``plan.tau`` defaults to ``1/sqrt(d_head)``; a store must have width ``d_head``.
    """
    if x.ndim != 3 or x.shape[2] != dims.d_model:
        raise DimensionError(f"expected [B, S, {dims.d_model}] input, got {x.shape}")
    q_h = split_heads(matmul(x, proj.w_q), dims)
    k_h = split_heads(matmul(x, proj.w_k), dims)
    v_h = split_heads(matmul(x, proj.w_v), dims)
    out = np.empty_like(q_h)
    for bi in range(x.shape[0]):
        for hi in range(dims.n_heads):
            out[bi, hi] = block_mka(q_h[bi, hi], k_h[bi, hi], v_h[bi, hi], plan, store, workers)
    return matmul(merge_heads(out), proj.w_o)
