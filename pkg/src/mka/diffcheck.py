"""Analytic gradients for the gate and the gated mixture, checked against central differences."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from . import rng
from .engines.mixture import Level, _prepare, gated_mixture_stable, stable_state
from .routing import GateParams, gate, gate_backward
from .tensor import softmax_rows


@dataclass(frozen=True)
class GradReport:
    max_rel_err: float
    max_abs_err: float
    n_params: int
    step: float
    nonfinite: tuple[int, ...] = field(default=())

    @property
    def ok(self) -> bool:
        return not self.nonfinite and np.isfinite(self.max_rel_err)


def fd_gradient(f: Callable[[np.ndarray], float], x0: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at the flat vector ``x0``.

    Coordinates where either evaluation is non-finite come back as NaN and are
    listed in a :class:`RuntimeWarning`.
    """
    if not h > 0:
        raise ValueError(f"step must be positive, got {h}")
    x0 = np.asarray(x0, dtype=np.float64).ravel()
    grad = np.empty_like(x0)
    bad = []
    x = x0.copy()
    for i in range(x0.size):
        x[i] = x0[i] + h
        f_plus = f(x)
        x[i] = x0[i] - h
        f_minus = f(x)
        x[i] = x0[i]
        if np.isfinite(f_plus) and np.isfinite(f_minus):
            grad[i] = (f_plus - f_minus) / (2 * h)
        else:
            grad[i] = np.nan
            bad.append(i)
    if bad:
        warnings.warn(f"non-finite evaluations at coordinates {bad}", RuntimeWarning, stacklevel=2)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def compare(analytic: np.ndarray, numeric: np.ndarray, h: float) -> GradReport:
    analytic = np.ravel(analytic)
    numeric = np.ravel(numeric)
    bad = tuple(int(i) for i in np.flatnonzero(~np.isfinite(numeric)))
    ok = np.isfinite(numeric)
    rel = relative_error(analytic[ok], numeric[ok])
    abs_err = np.abs(analytic[ok] - numeric[ok])
    return GradReport(
        max_rel_err=float(rel.max(initial=0.0)),
        max_abs_err=float(abs_err.max(initial=0.0)),
        n_params=analytic.size,
        step=h,
        nonfinite=bad,
    )


class MixtureGrads(NamedTuple):
    q: np.ndarray
    lambda_logits: np.ndarray
    values: list


def grad_gated_mixture(
    q: np.ndarray,
    levels: Sequence[Level],
    lambda_logits: np.ndarray,
    upstream: np.ndarray,
    scale: Optional[float] = None,
) -> MixtureGrads:
    """Gradients of ``<upstream, Attn(q)>`` where the gate is ``softmax(lambda_logits)``.

    ``lambda_logits`` is ``[L]`` (shared by all rows) or ``[S, L]``. Returns the
    gradients for ``q``, the logits and each level's values. The exp-scores come
    from the max-shifted scan, so large scores do not overflow.
    """
    logits = np.asarray(lambda_logits, dtype=np.float64)
    lam = softmax_rows(logits)
    state = stable_state(q, levels, lam, scale)
    q, levels, lam_rows, tau, _ = _prepare(q, levels, lam, scale)
    upstream = np.asarray(upstream, dtype=q.dtype)
    if upstream.shape != state.a.shape:
        raise ValueError(f"upstream shape {upstream.shape} != output shape {state.a.shape}")
    z = state.z[:, None]
    out = state.a / z
    g_dot_o = (upstream * out).sum(axis=1, keepdims=True)

    grad_q = np.zeros_like(q)
    grad_lam = np.zeros_like(lam_rows)
    grad_v = []
    for i, (k, v) in enumerate(levels):
        if not k.shape[0]:
            grad_v.append(np.zeros_like(v))
            continue
        # e / z is the level's share of the normaliser before gating
        share = np.exp(tau * (q @ k.T) - state.mu[:, None]) / z
        delta = upstream @ v.T - g_dot_o
        grad_lam[:, i] = (share * delta).sum(axis=1)
        weighted = lam_rows[:, [i]] * share
        grad_q += tau * ((weighted * delta) @ k)
        grad_v.append(weighted.T @ upstream)

    if logits.ndim == 1:
        g = grad_lam.sum(axis=0)
        grad_logits = lam * (g - (lam * g).sum())
    else:
        grad_logits = lam * (grad_lam - (lam * grad_lam).sum(axis=1, keepdims=True))
    return MixtureGrads(grad_q, grad_logits, grad_v)


def _random_levels(seed: int, s: int, d: int, n_keys: int, n_levels: int = 3):
    q = rng.normal(rng.derive(seed, 1), (s, d))
    levels = [
        (rng.normal(rng.derive(seed, 2, i), (n_keys, d)), rng.normal(rng.derive(seed, 3, i), (n_keys, d)))
        for i in range(n_levels)
    ]
    logits = rng.normal(rng.derive(seed, 4), (n_levels,))
    upstream = rng.normal(rng.derive(seed, 5), (s, d))
    return q, levels, logits, upstream


def check_gated_mixture(seed: int, s: int = 3, d: int = 2, n_keys: int = 2, h: float = 1e-5) -> GradReport:
    """Compare :func:`grad_gated_mixture` with central differences on one seeded instance."""
    q, levels, logits, upstream = _random_levels(seed, s, d, n_keys)
    sizes = [q.size, logits.size] + [v.size for _, v in levels]
    cuts = np.cumsum(sizes)[:-1]

    def loss(theta: np.ndarray) -> float:
        parts = np.split(theta, cuts)
        lv = [(k, p.reshape(v.shape)) for (k, v), p in zip(levels, parts[2:])]
        lam = softmax_rows(parts[1])
        return float((upstream * gated_mixture_stable(parts[0].reshape(q.shape), lv, lam)).sum())

    theta0 = np.concatenate([q.ravel(), logits] + [v.ravel() for _, v in levels])
    g = grad_gated_mixture(q, levels, logits, upstream)
    analytic = np.concatenate([g.q.ravel(), g.lambda_logits.ravel()] + [gv.ravel() for gv in g.values])
    return compare(analytic, fd_gradient(loss, theta0, h), h)


def check_gate_backward(seed: int, batch: int = 2, s: int = 3, d_model: int = 4, h: float = 1e-5) -> GradReport:
    """Compare :func:`mka.routing.gate_backward` with central differences on one seeded instance."""
    q = rng.normal(rng.derive(seed, 11), (batch, s, d_model))
    params = GateParams(
        rng.normal(rng.derive(seed, 12), (d_model, 3)) * 0.5,
        rng.normal(rng.derive(seed, 13), (3,)) * 0.5,
    )
    upstream = rng.normal(rng.derive(seed, 14), (batch, s, 3))
    cuts = np.cumsum([q.size, params.w.size])

    def loss(theta: np.ndarray) -> float:
        pq, pw, pb = np.split(theta, cuts)
        lam = gate(pq.reshape(q.shape), GateParams(pw.reshape(params.w.shape), pb))
        return float((upstream * lam).sum())

    theta0 = np.concatenate([q.ravel(), params.w.ravel(), params.b])
    gq, gw, gb = gate_backward(q, params, upstream)
    analytic = np.concatenate([gq.ravel(), gw.ravel(), gb])
    return compare(analytic, fd_gradient(loss, theta0, h), h)
