"""Forward engines: dense multi-head baselines, gated mixtures and the blockwise scan."""

from .block import BlockPlan, block_mka, block_mka_forward
from .dense import (
    TIERS,
    FusedKvCache,
    KvCache,
    ProjectionSet,
    causal_attention,
    fastmka_decode_step,
    fastmka_forward,
    fuse_levels,
    reference_causal_mha,
    symbolic_mka_forward,
    tier_ablation,
)
from .mixture import (
    DegenerateDenominator,
    OnlineSoftmaxState,
    gated_mixture_direct,
    gated_mixture_recursive,
    gated_mixture_stable,
    recursive_accumulators,
    stable_state,
)
