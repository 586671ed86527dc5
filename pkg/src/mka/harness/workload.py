"""Seeded synthetic inputs.

Tokens are SplitMix64 draws mapped to doubles in ``[-sqrt(3), sqrt(3))`` (unit
variance) using only integer arithmetic and one scaling, so a seed yields the
same bits on every platform.
"""

from __future__ import annotations

import math

import numpy as np

from .. import rng
from ..engines.dense import ProjectionSet
from ..routing import GateParams

_LIMIT = math.sqrt(3.0)


def synth_workload(seed: int, batch: int, seq_len: int, d_model: int, dtype=np.float64) -> np.ndarray:
    if min(batch, seq_len, d_model) <= 0:
        raise ValueError(f"workload dims must be positive, got {(batch, seq_len, d_model)}")
    x = rng.uniform(seed, (batch, seq_len, d_model), -_LIMIT, _LIMIT)
    return x.astype(dtype)


def synth_model(seed: int, d_model: int, dtype=np.float64) -> tuple[ProjectionSet, GateParams]:
    """Projections and gate parameters drawn from child seeds of ``seed``."""
    proj = ProjectionSet.init(d_model, rng.derive(seed, 101), dtype)
    gate_params = GateParams.init(d_model, rng.derive(seed, 102), dtype=dtype)
    return proj, gate_params
