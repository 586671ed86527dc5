"""Per-token routing gate over the three memory levels.

The gate is a single affine map ``D -> 3`` followed by a softmax. Two fixed
variants exist for ablations: uniform weights and hard top-k.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import rng
from .tensor import DimensionError, softmax_rows

N_LEVELS = 3
ROUTING_KINDS = ("learned_soft", "fixed_uniform", "hard_topk")


@dataclass(frozen=True)
class GateParams:
    w: np.ndarray  # [D, 3]
    b: np.ndarray  # [3]

    def __post_init__(self):
        if self.w.ndim != 2 or self.w.shape[1] != N_LEVELS or self.b.shape != (N_LEVELS,):
            raise DimensionError(f"gate expects w [D, 3] and b [3], got {self.w.shape} and {self.b.shape}")
        if not (np.isfinite(self.w).all() and np.isfinite(self.b).all()):
            raise ValueError("gate parameters must be finite")

    @classmethod
    def init(cls, d_model: int, seed: int = 0, scale: float = 0.02, dtype=np.float64) -> "GateParams":
        w = rng.uniform(seed, (d_model, N_LEVELS), -scale, scale).astype(dtype)
        return cls(w, np.zeros(N_LEVELS, dtype=dtype))

    @classmethod
    def constant(cls, d_model: int, bias, dtype=np.float64) -> "GateParams":
        """Input-independent gate whose logits are ``bias`` for every token."""
        return cls(np.zeros((d_model, N_LEVELS), dtype=dtype), np.asarray(bias, dtype=dtype))

    def astype(self, dtype) -> "GateParams":
        return GateParams(self.w.astype(dtype), self.b.astype(dtype))


@dataclass(frozen=True)
class RoutingPolicy:
    kind: str = "learned_soft"
    k: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ROUTING_KINDS:
            raise ValueError(f"unknown routing kind {self.kind!r}")
        if self.kind == "hard_topk":
            if self.k not in (1, 2):
                raise ValueError(f"hard_topk needs k in {{1, 2}}, got {self.k}")
        elif self.k is not None:
            raise ValueError("k is only valid for hard_topk routing")


LEARNED_SOFT = RoutingPolicy()


def gate_logits(q: np.ndarray, params: GateParams) -> np.ndarray:
    if q.shape[-1] != params.w.shape[0]:
        raise DimensionError(f"query width {q.shape[-1]} != gate input width {params.w.shape[0]}")
    return q @ params.w + params.b


def topk_mask(logits: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the ``k`` largest logits per row; ties prefer the lower level index."""
    order = np.argsort(-logits, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(logits.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def gate(q: np.ndarray, params: GateParams, policy: RoutingPolicy = LEARNED_SOFT) -> np.ndarray:
    """Routing weights ``[..., 3]`` for queries ``[..., D]``; every row lies on the simplex."""
    q = np.asarray(q)
    if policy.kind == "fixed_uniform":
        if q.shape[-1] != params.w.shape[0]:
            raise DimensionError(f"query width {q.shape[-1]} != gate input width {params.w.shape[0]}")
        return np.full(q.shape[:-1] + (N_LEVELS,), 1.0 / N_LEVELS, dtype=q.dtype)
    logits = gate_logits(q, params)
    if policy.kind == "hard_topk":
        logits = np.where(topk_mask(logits, policy.k), logits, -np.inf)
    return softmax_rows(logits)


def gate_backward(
    q: np.ndarray,
    params: GateParams,
    upstream: np.ndarray,
    policy: RoutingPolicy = LEARNED_SOFT,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of ``sum(upstream * gate(q))`` with respect to ``(q, w, b)``.

    Only the learned soft gate is differentiable; the other policies raise.
    """
    if policy.kind != "learned_soft":
        raise ValueError(f"gate_backward is undefined for {policy.kind!r} routing")
    lam = gate(q, params, policy)
    if upstream.shape != lam.shape:
        raise DimensionError(f"upstream shape {upstream.shape} != routing shape {lam.shape}")
    # softmax JVP: dL/dlogit = lam * (u - <lam, u>)
    dlogits = lam * (upstream - (lam * upstream).sum(axis=-1, keepdims=True))
    flat_q = q.reshape(-1, q.shape[-1])
    flat_d = dlogits.reshape(-1, N_LEVELS)
    grad_q = dlogits @ params.w.T
    grad_w = flat_q.T @ flat_d
    grad_b = flat_d.sum(axis=0)
    return grad_q, grad_w, grad_b
