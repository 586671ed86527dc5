"""Gated-mixture attention: levels are mixed as unnormalised exp-scores, then normalised once.

For query rows ``Q`` and levels ``(K_l, V_l)`` with gate weights ``lam_l``::

    Attn(Q) = sum_l lam_l exp(tau Q K_l^T) V_l / sum_l lam_l exp(tau Q K_l^T)

This is not the same estimator as mixing per-level softmax outputs; see
:func:`mka.engines.dense.symbolic_mka_forward` for that one.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence, Tuple

import numpy as np

from ..tensor import DimensionError

Level = Tuple[np.ndarray, np.ndarray]


class DegenerateDenominator(ValueError):
    """Some query row has no level that is both non-empty and positively weighted."""


class OnlineSoftmaxState:
    """Running ``(mu, z, a)`` for a set of query rows.

    ``mu`` is the running max of the scores seen so far, ``z`` the weighted sum of
    ``exp(score - mu)`` and ``a`` the matching weighted value sum. Each update
    rescales the previous ``z`` and ``a`` by ``exp(mu_old - mu_new)``.
    """

    def __init__(self, n_rows: int, d_value: int, dtype=np.float64):
        self.mu = np.full(n_rows, -np.inf, dtype=dtype)
        self.z = np.zeros(n_rows, dtype=dtype)
        self.a = np.zeros((n_rows, d_value), dtype=dtype)

    def update(self, scores: np.ndarray, values: np.ndarray, weight=1.0) -> None:
        """Fold in ``scores`` [rows, n] (``-inf`` = masked) with ``values``.

        ``values`` is ``[n, d_v]`` shared by all rows or ``[rows, n, d_v]`` per
        row. ``weight`` is a scalar or a per-row array multiplying every exp-score.
        """
        if scores.shape[1] == 0:
            return
        mu_new = np.maximum(self.mu, scores.max(axis=1))
        # rows that have only seen masked scores keep a zero shift
        shift = np.where(np.isfinite(mu_new), mu_new, 0).astype(self.mu.dtype)
        rescale = np.exp(self.mu - shift)
        p = np.exp(scores - shift[:, None])
        if np.ndim(weight):
            p *= np.asarray(weight, dtype=p.dtype)[:, None]
        elif weight != 1.0:
            p *= p.dtype.type(weight)
        self.z = self.z * rescale + p.sum(axis=1)
        if values.ndim == 3:
            pv = np.matmul(p[:, None, :], values)[:, 0, :]
        else:
            pv = p @ values
        self.a = self.a * rescale[:, None] + pv
        self.mu = mu_new

    def result(self) -> np.ndarray:
        return self.a / self.z[:, None]


def _prepare(q, levels: Sequence[Level], lam, scale):
    q = np.asarray(q)
    if q.ndim != 2:
        raise DimensionError(f"queries must be [S, d], got {q.shape}")
    s, d = q.shape
    levels = [(np.asarray(k), np.asarray(v)) for k, v in levels]
    if not levels:
        raise DegenerateDenominator("no memory levels given")
    d_v = None
    for k, v in levels:
        if k.ndim != 2 or v.ndim != 2 or k.shape[0] != v.shape[0]:
            raise DimensionError(f"level needs keys [n, d] and values [n, d_v], got {k.shape}, {v.shape}")
        if k.shape[0] and k.shape[1] != d:
            raise DimensionError(f"key width {k.shape[1]} != query width {d}")
        if v.shape[0]:
            if d_v is not None and v.shape[1] != d_v:
                raise DimensionError("all levels need the same value width")
            d_v = v.shape[1]
    lam = np.asarray(lam, dtype=q.dtype)
    if lam.ndim == 1:
        lam = np.broadcast_to(lam, (s, lam.shape[0]))
    if lam.shape != (s, len(levels)):
        raise DimensionError(f"gate weights must be [{len(levels)}] or [{s}, {len(levels)}], got {lam.shape}")
    if (lam < 0).any():
        raise ValueError("gate weights must be nonnegative")
    nonempty = np.array([k.shape[0] > 0 for k, _ in levels])
    if not ((lam > 0) & nonempty[None, :]).any(axis=1).all():
        raise DegenerateDenominator("a query row has no positively weighted non-empty level")
    tau = 1.0 / math.sqrt(d) if scale is None else scale
    return q, levels, lam, q.dtype.type(tau), d_v


def gated_mixture_direct(q, levels: Sequence[Level], lam, scale: Optional[float] = None) -> np.ndarray:
    """Evaluate the mixture formula in one shot over the concatenated levels (no max shift)."""
    q, levels, lam, tau, _ = _prepare(q, levels, lam, scale)
    keys = np.concatenate([k for k, _ in levels if k.shape[0]])
    values = np.concatenate([v for _, v in levels if v.shape[0]])
    weights = np.concatenate(
        [np.repeat(lam[:, [i]], k.shape[0], axis=1) for i, (k, _) in enumerate(levels) if k.shape[0]], axis=1
    )
    w = weights * np.exp(tau * (q @ keys.T))
    return (w @ values) / w.sum(axis=1, keepdims=True)


def recursive_accumulators(q, levels: Sequence[Level], lam, scale: Optional[float] = None):
    """Unshifted level-by-level accumulation; returns the final ``(alpha, z)``."""
    q, levels, lam, tau, d_v = _prepare(q, levels, lam, scale)
    alpha = np.zeros((q.shape[0], d_v), dtype=q.dtype)
    z = np.zeros(q.shape[0], dtype=q.dtype)
    for i, (k, v) in enumerate(levels):
        if not k.shape[0]:
            continue
        e = lam[:, [i]] * np.exp(tau * (q @ k.T))
        alpha = alpha + e @ v
        z = z + e.sum(axis=1)
    return alpha, z


def gated_mixture_recursive(q, levels: Sequence[Level], lam, scale: Optional[float] = None) -> np.ndarray:
    """Level-by-level recursion without max shift; overflows where the plain formula does."""
    alpha, z = recursive_accumulators(q, levels, lam, scale)
    return alpha / z[:, None]


def stable_state(q, levels: Sequence[Level], lam, scale: Optional[float] = None) -> OnlineSoftmaxState:
    q, levels, lam, tau, d_v = _prepare(q, levels, lam, scale)
    state = OnlineSoftmaxState(q.shape[0], d_v, dtype=q.dtype)
    for i, (k, v) in enumerate(levels):
        if k.shape[0]:
            state.update(tau * (q @ k.T), v, lam[:, i])
    return state


def gated_mixture_stable(q, levels: Sequence[Level], lam, scale: Optional[float] = None) -> np.ndarray:
    """Max-shifted recursion; finite whenever the shifted scores are."""
    return stable_state(q, levels, lam, scale).result()
