"""Slow, loop-based reference computations used by the verification suite.

None of these share code with the engines they check beyond numpy itself.
"""

from __future__ import annotations

import math

import numpy as np


def naive_attention(q, k, v, visible, scale):
    """Softmax attention row by row; ``visible(i, j)`` says whether query ``i`` sees key ``j``."""
    n_q, n_k = q.shape[0], k.shape[0]
    out = np.zeros((n_q, v.shape[1]), dtype=np.float64)
    for i in range(n_q):
        cols = [j for j in range(n_k) if visible(i, j)]
        scores = [scale * sum(float(q[i, c]) * float(k[j, c]) for c in range(q.shape[1])) for j in cols]
        m = max(scores)
        weights = [math.exp(s - m) for s in scores]
        total = sum(weights)
        for w, j in zip(weights, cols):
            out[i] += (w / total) * v[j]
    return out


def naive_causal_mha(x, proj, dims, scale=None):
    """Causal multi-head attention with explicit per-head loops."""
    tau = 1.0 / math.sqrt(dims.d_head) if scale is None else scale
    out = np.zeros(x.shape, dtype=np.float64)
    for b in range(x.shape[0]):
        q = x[b] @ proj.w_q
        k = x[b] @ proj.w_k
        v = x[b] @ proj.w_v
        heads = []
        for h in range(dims.n_heads):
            cols = slice(h * dims.d_head, (h + 1) * dims.d_head)
            heads.append(naive_attention(q[:, cols], k[:, cols], v[:, cols], lambda i, j: j <= i, tau))
        out[b] = np.concatenate(heads, axis=1) @ proj.w_o
    return out


def windowed_causal(window_rows_start):
    """Visibility for blockwise local attention: ``window_rows_start(i) <= j <= i``."""
    return lambda i, j: window_rows_start(i) <= j <= i


def brute_prefix_mean(x):
    """``m[:, t] = mean(x[:, :t+1])`` by direct summation of each prefix."""
    out = np.empty(x.shape, dtype=np.float64)
    for t in range(x.shape[1]):
        out[:, t] = x[:, : t + 1].sum(axis=1) / (t + 1)
    return out


def exact_nearest(q, centroids):
    """Index of the centroid with the highest cosine similarity to ``q``."""
    qn = q / np.linalg.norm(q)
    cn = centroids / np.linalg.norm(centroids, axis=1, keepdims=True)
    return int(np.argmax(cn @ qn))
