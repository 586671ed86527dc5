"""Dense numeric core shared by every engine.

Tensors are plain :class:`numpy.ndarray` values (C-contiguous, row-major).
float64 is the oracle precision and float32 the benchmark precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PRECISIONS = {"single": np.float32, "double": np.float64}


class DimensionError(ValueError):
    """Raised when tensor extents are inconsistent."""


def dtype_for(precision: str) -> type:
    try:
        return PRECISIONS[precision]
    except KeyError:
        raise ValueError(f"precision must be one of {sorted(PRECISIONS)}, got {precision!r}") from None


@dataclass(frozen=True)
class ModelDims:
    d_model: int
    n_heads: int

    def __post_init__(self):
        if self.d_model <= 0 or self.n_heads <= 0:
            raise DimensionError(f"dims must be positive, got D={self.d_model}, H={self.n_heads}")
        if self.d_model % self.n_heads:
            raise DimensionError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product over the last two axes (leading axes broadcast).

    Raises:
        DimensionError: if the inner extents differ.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"inner extents differ: {a.shape} @ {b.shape} ({a.shape[-1]} != {b.shape[-2]})"
        )
    return np.matmul(a, b)


def softmax_rows(s: np.ndarray) -> np.ndarray:
    """Softmax along the last axis using max subtraction.

    ``-inf`` entries are treated as masked out; every row needs at least one
    finite entry. NaN anywhere is rejected.
    """
    s = np.asarray(s)
    if np.isnan(s).any():
        raise ValueError("softmax_rows received NaN input")
    mu = s.max(axis=-1, keepdims=True)
    if not np.isfinite(mu).all():
        raise ValueError("softmax_rows needs at least one finite entry per row")
    e = np.exp(s - mu)
    return e / e.sum(axis=-1, keepdims=True)


def shifted_exp(s: np.ndarray, mu) -> np.ndarray:
    """Elementwise ``exp(s - mu)``; ``mu`` broadcasts against ``s``."""
    s = np.asarray(s)
    return np.exp(s - np.asarray(mu, dtype=s.dtype))


def split_heads(x: np.ndarray, dims: ModelDims) -> np.ndarray:
    """``[B, S, D] -> [B, H, S, d_h]``; head ``h`` owns columns ``h*d_h:(h+1)*d_h``."""
    if x.ndim != 3:
        raise DimensionError(f"split_heads expects [B, S, D], got shape {x.shape}")
    b, s, d = x.shape
    if d != dims.d_model:
        raise DimensionError(f"last extent {d} != d_model {dims.d_model}")
    return np.ascontiguousarray(x.reshape(b, s, dims.n_heads, dims.d_head).transpose(0, 2, 1, 3))


def merge_heads(x: np.ndarray) -> np.ndarray:
    """Inverse of :func:`split_heads`: ``[B, H, S, d_h] -> [B, S, H*d_h]``."""
    if x.ndim != 4:
        raise DimensionError(f"merge_heads expects [B, H, S, d_h], got shape {x.shape}")
    b, h, s, dh = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3).reshape(b, s, h * dh))


def causal_mask(n_q: int, n_k: int, offset: int = 0) -> np.ndarray:
    """Boolean ``[n_q, n_k]`` mask; query ``i`` (absolute ``offset + i``) sees keys ``<= offset + i``."""
    return np.arange(n_k)[None, :] <= (np.arange(n_q)[:, None] + offset)
