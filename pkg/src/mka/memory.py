"""The three memory levels: local tokens, causal summaries and a hashed chunk store."""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass
from os import PathLike
from typing import NamedTuple, Optional

import numpy as np

from . import rng
from .tensor import DimensionError

SNAPSHOT_MAGIC = b"MKA3"
SNAPSHOT_VERSION = 1
_HEADER = struct.Struct("<4sIIIQQ")
_CHUNK_HEADER = struct.Struct("<QQQ")
_HYPERPLANE_TAG = 0x4C5348  # "LSH"


@dataclass(frozen=True)
class SummaryMode:
    """How L2 summarises the causal prefix: running mean or exponential moving average."""

    kind: str = "prefix_mean"
    ema_decay: Optional[float] = None

    def __post_init__(self):
        if self.kind == "prefix_mean":
            if self.ema_decay is not None:
                raise ValueError("ema_decay is only valid for kind='ema'")
        elif self.kind == "ema":
            if self.ema_decay is None or not 0.0 < self.ema_decay < 1.0:
                raise ValueError(f"ema_decay must lie in (0, 1), got {self.ema_decay}")
        else:
            raise ValueError(f"unknown summary kind {self.kind!r}")


@dataclass(frozen=True)
class SummaryState:
    """Carry-over needed to continue a summary past the end of a sequence.

    ``total``/``count`` drive the prefix mean; ``last`` is the previous EMA row.
    """

    total: np.ndarray
    count: int
    last: np.ndarray


def summarize(x: np.ndarray, mode: SummaryMode, state: Optional[SummaryState] = None):
    """Causal summaries of ``x`` ([B, S, D]) along axis 1, continuing from ``state``.

    Returns ``(m2, new_state)``.
    """
    b, s, d = x.shape
    if s == 0:
        raise DimensionError("summarize needs at least one position")
    if mode.kind == "prefix_mean":
        total0 = np.zeros((b, d), dtype=x.dtype) if state is None else state.total
        count0 = 0 if state is None else state.count
        running = np.cumsum(x, axis=1)
        running += total0[:, None, :]
        counts = np.arange(count0 + 1, count0 + s + 1, dtype=x.dtype)
        m2 = running / counts[None, :, None]
        new = SummaryState(total=running[:, -1].copy(), count=count0 + s, last=m2[:, -1].copy())
        return m2, new

    decay = x.dtype.type(mode.ema_decay)
    m2 = np.empty_like(x)
    if state is None:
        prev = x[:, 0]
        m2[:, 0] = prev
        start = 1
    else:
        prev = state.last
        start = 0
    for t in range(start, s):
        prev = decay * prev + (1 - decay) * x[:, t]
        m2[:, t] = prev
    count0 = 0 if state is None else state.count
    total0 = np.zeros((b, d), dtype=x.dtype) if state is None else state.total
    new = SummaryState(total=total0 + x.sum(axis=1), count=count0 + s, last=m2[:, -1].copy())
    return m2, new


@dataclass(frozen=True)
class Chunk:
    chunk_id: int
    token_range: tuple[int, int]
    centroid: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    signature: np.ndarray  # bool[h_bits]


class ChunkStore:
    """Long-term memory bank with random-hyperplane signatures and Hamming top-R recall.

    Writes are serialised by a lock; readers work on an immutable snapshot of the
    chunk list, so many concurrent readers are safe alongside one writer.
    """

    def __init__(self, d: int, h_bits: int = 64, seed: int = 0, top_r: int = 8):
        if d <= 0 or h_bits <= 0:
            raise ValueError(f"d and h_bits must be positive, got d={d}, h_bits={h_bits}")
        if top_r < 0:
            raise ValueError(f"top_r must be >= 0, got {top_r}")
        self.d = d
        self.h_bits = h_bits
        self.seed = seed
        self.top_r = top_r
        planes = rng.normal(rng.derive(seed, _HYPERPLANE_TAG), (h_bits, d))
        planes.flags.writeable = False
        self.hyperplanes = planes
        self._lock = threading.Lock()
        # (chunks, signature matrix) swapped in one assignment so readers see a consistent pair
        self._state: tuple[tuple[Chunk, ...], np.ndarray] = ((), np.zeros((0, h_bits), dtype=bool))

    def __len__(self) -> int:
        return len(self._state[0])

    @property
    def chunks(self) -> tuple[Chunk, ...]:
        return self._state[0]

    def signature(self, v: np.ndarray) -> np.ndarray:
        """Bit ``i`` is set iff ``hyperplanes[i] . v >= 0``. Accepts ``[d]`` or ``[n, d]``."""
        v = np.asarray(v, dtype=np.float64)
        if v.shape[-1] != self.d:
            raise DimensionError(f"vector width {v.shape[-1]} != store width {self.d}")
        return (v @ self.hyperplanes.T) >= 0

    def insert(self, keys: np.ndarray, values: np.ndarray, token_range: tuple[int, int]) -> int:
        keys = np.array(keys, dtype=np.float64)
        values = np.array(values, dtype=np.float64)
        if keys.ndim != 2 or values.ndim != 2:
            raise DimensionError("chunk keys and values must be 2-d")
        if keys.shape[0] != values.shape[0]:
            raise DimensionError(f"key rows {keys.shape[0]} != value rows {values.shape[0]}")
        if keys.shape[0] == 0:
            raise DimensionError("a chunk needs at least one row")
        if keys.shape[1] != self.d or values.shape[1] != self.d:
            raise DimensionError(
                f"chunk width {keys.shape[1]}/{values.shape[1]} != store width {self.d}"
            )
        start, end = (int(t) for t in token_range)
        if end - start != keys.shape[0]:
            raise DimensionError(f"token range [{start}, {end}) does not cover {keys.shape[0]} rows")
        centroid = keys.mean(axis=0)
        sig = self.signature(centroid)
        for arr in (keys, values, centroid, sig):
            arr.flags.writeable = False
        with self._lock:
            chunks = self._state[0]
            chunk_id = chunks[-1].chunk_id + 1 if chunks else 0
            self._append(Chunk(chunk_id, (start, end), centroid, keys, values, sig))
        return chunk_id

    def _append(self, chunk: Chunk) -> None:
        chunks, sigs = self._state
        self._state = (chunks + (chunk,), np.vstack([sigs, chunk.signature[None, :]]))

    def rank(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray, tuple[Chunk, ...]]:
        """Top-R chunk positions and Hamming distances for each row of ``queries`` ([m, d]).

        Returns ``(index [m, r], distance [m, r], chunk snapshot)`` with
        ``r = min(top_r, len(store))``; ties go to the lower chunk id.
        """
        chunks, sigs = self._state
        queries = np.atleast_2d(queries)
        r = min(self.top_r, len(chunks))
        m = queries.shape[0]
        if r == 0:
            return np.zeros((m, 0), dtype=np.int64), np.zeros((m, 0), dtype=np.int64), chunks
        qs = self.signature(queries).astype(np.float32)
        cs = sigs.astype(np.float32)
        dist = (qs @ (1.0 - cs).T + (1.0 - qs) @ cs.T).astype(np.int64)
        # chunks are stored in ascending id order, so a stable sort breaks ties by id
        order = np.argsort(dist, axis=1, kind="stable")[:, :r]
        return order, np.take_along_axis(dist, order, axis=1), chunks

    def retrieve(self, q: np.ndarray) -> list[tuple[Chunk, int]]:
        idx, dist, chunks = self.rank(np.asarray(q)[None, :])
        return [(chunks[i], int(h)) for i, h in zip(idx[0], dist[0])]

    def save(self, path: str | PathLike) -> None:
        chunks = self.chunks
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, self.d, self.h_bits, self.seed, len(chunks)))
            for c in chunks:
                fh.write(_CHUNK_HEADER.pack(c.chunk_id, c.token_range[0], c.token_range[1]))
                fh.write(np.packbits(c.signature, bitorder="little").tobytes())
                for arr in (c.centroid, c.keys, c.values):
                    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str | PathLike, top_r: int = 8) -> "ChunkStore":
        with open(path, "rb") as fh:
            buf = fh.read()
        if len(buf) < _HEADER.size:
            raise ValueError("truncated chunk-store snapshot")
        magic, version, d, h_bits, seed, count = _HEADER.unpack_from(buf, 0)
        if magic != SNAPSHOT_MAGIC:
            raise ValueError(f"bad snapshot magic {magic!r}")
        if version != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported snapshot version {version}")
        store = cls(d, h_bits=h_bits, seed=seed, top_r=top_r)
        pos = _HEADER.size
        sig_bytes = (h_bits + 7) // 8
        try:
            for _ in range(count):
                chunk_id, start, end = _CHUNK_HEADER.unpack_from(buf, pos)
                pos += _CHUNK_HEADER.size
                sig = np.unpackbits(
                    np.frombuffer(buf, np.uint8, sig_bytes, pos), count=h_bits, bitorder="little"
                ).astype(bool)
                pos += sig_bytes
                n = end - start
                arrays = []
                for shape in ((d,), (n, d), (n, d)):
                    size = int(np.prod(shape))
                    arrays.append(np.frombuffer(buf, "<f8", size, pos).astype(np.float64).reshape(shape))
                    pos += 8 * size
                centroid, keys, values = arrays
                for arr in (centroid, keys, values, sig):
                    arr.flags.writeable = False
                store._append(Chunk(chunk_id, (start, end), centroid, keys, values, sig))
        except (struct.error, ValueError) as exc:
            raise ValueError(f"corrupt chunk-store snapshot: {exc}") from exc
        if pos != len(buf):
            raise ValueError(f"trailing bytes in snapshot ({len(buf) - pos})")
        return store


def chunk_store_from_sequence(
    keys: np.ndarray,
    values: np.ndarray,
    block: int,
    h_bits: int = 64,
    seed: int = 0,
    top_r: int = 8,
    offset: int = 0,
) -> ChunkStore:
    """Cut ``keys``/``values`` ([N, d]) into consecutive chunks of ``block`` rows (last may be short)."""
    store = ChunkStore(keys.shape[1], h_bits=h_bits, seed=seed, top_r=top_r)
    for start in range(0, keys.shape[0], block):
        end = min(start + block, keys.shape[0])
        store.insert(keys[start:end], values[start:end], (offset + start, offset + end))
    return store


class MemoryLevels(NamedTuple):
    m1: np.ndarray
    m2: np.ndarray
    m3: np.ndarray


def retrieval_rows(store: ChunkStore, queries: np.ndarray) -> np.ndarray:
    """Mean of the top-R recalled centroids for every query row; zeros when nothing is recalled."""
    shape = queries.shape
    flat = queries.reshape(-1, shape[-1])
    idx, _, chunks = store.rank(flat)
    if idx.shape[1] == 0:
        return np.zeros(shape, dtype=queries.dtype)
    centroids = np.stack([c.centroid for c in chunks])
    return centroids[idx].mean(axis=1).astype(queries.dtype).reshape(shape)


def build_levels(
    x: np.ndarray,
    mode: SummaryMode,
    store: Optional[ChunkStore] = None,
    queries: Optional[np.ndarray] = None,
) -> MemoryLevels:
    """Local tokens, causal summaries and per-token retrieval rows for ``x`` ([B, S, D])."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise DimensionError(f"build_levels expects [B, S, D], got {x.shape}")
    m2, _ = summarize(x, mode)
    m3 = np.zeros_like(x)
    if store is not None:
        if store.d != x.shape[-1]:
            raise DimensionError(f"chunk store width {store.d} != model width {x.shape[-1]}")
        if queries is None:
            raise ValueError("retrieval needs per-token queries")
        if queries.shape != x.shape:
            raise DimensionError(f"queries shape {queries.shape} != tokens shape {x.shape}")
        if len(store):
            m3 = retrieval_rows(store, queries)
    return MemoryLevels(x, m2, m3)
