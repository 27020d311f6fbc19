"""Analytic multiply-accumulate accounting, checked by an instrumented counter.

Counts are MACs of matmuls only; softmax, GeLU, layer norm, and residual adds
are excluded. Per block with `ki` input-mask rows and `ko` output-mask rows
(embedding width d, MLP width d'):

    query + output projection   2 * ko * d^2
    key + value projection      2 * ki * d^2   (charged at the input mask)
    attention map + weighted sum 2 * ko * ki * d
    MLP                          2 * ko * d * d'

At ki = ko = N this is the unpruned 2N^2 d + 4N d^2 MSA cost and 2N d d' MLP
cost. The gather execution path performs exactly these multiplications, so
the instrumented counter matches the formulas identically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .model import (
    MacCounter,
    MaskSchedule,
    ModelConfig,
    embed_tokens,
    full_mask,
    kept_count,
    pruned_block_forward_gather,
)


@dataclass
class LayerCost:
    layer: int
    kept_in: int
    kept_out: int
    msa_macs: int
    mlp_macs: int

    @property
    def total(self) -> int:
        return self.msa_macs + self.mlp_macs

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "kept_in": self.kept_in,
            "kept_out": self.kept_out,
            "msa_macs": self.msa_macs,
            "mlp_macs": self.mlp_macs,
            "total_macs": self.total,
        }


@dataclass
class CostReport:
    per_layer: list
    total_macs: int
    baseline_macs: int
    reduction_percent: float

    def to_dict(self) -> dict:
        return {
            "unit": "multiply-accumulates",
            "per_layer": [c.to_dict() for c in self.per_layer],
            "total_macs": self.total_macs,
            "baseline_macs": self.baseline_macs,
            "reduction_percent": self.reduction_percent,
        }


def block_cost(n: int, dim: int, mlp_dim: int, kept_in: int, kept_out: int) -> tuple:
    """(msa_macs, mlp_macs) for one block with the given kept counts."""
    if not 1 <= kept_out <= kept_in <= n:
        raise ShapeError(
            f"kept counts must satisfy 1 <= kept_out <= kept_in <= N, "
            f"got kept_out={kept_out}, kept_in={kept_in}, N={n}"
        )
    msa = 2 * kept_out * dim * dim + 2 * kept_in * dim * dim + 2 * kept_out * kept_in * dim
    mlp = 2 * kept_out * dim * mlp_dim
    return msa, mlp


def schedule_cost(config: ModelConfig, schedule: MaskSchedule | None = None) -> CostReport:
    """Per-layer and total MACs for a schedule (all-ones when omitted)."""
    n = config.patches
    counts = schedule.kept_counts() if schedule is not None else [n] * config.layers
    if len(counts) != config.layers:
        raise ShapeError(f"schedule has {len(counts)} masks for {config.layers} blocks")
    per_layer = []
    kept_in = n
    for j, kept_out in enumerate(counts):
        msa, mlp = block_cost(n, config.dim, config.mlp_dim, kept_in, kept_out)
        per_layer.append(LayerCost(j, kept_in, kept_out, msa, mlp))
        kept_in = kept_out
    total = sum(c.total for c in per_layer)
    base_msa, base_mlp = block_cost(n, config.dim, config.mlp_dim, n, n)
    baseline = config.layers * (base_msa + base_mlp)
    reduction = (1.0 - total / baseline) * 100.0
    return CostReport(per_layer, total, baseline, reduction)


def instrumented_mac_count(params, config: ModelConfig, schedule, raw_tokens) -> list:
    """Run the gather path on one input and tally executed matmul MACs.

    Returns one (msa_macs, mlp_macs) pair per block. Embedding and classifier
    head are not counted, matching `block_cost`.
    """
    raw = np.asarray(raw_tokens, dtype=np.float64)
    if raw.ndim == 3:
        if raw.shape[0] != 1:
            raise ShapeError("instrumented count takes a single input")
        raw = raw[0]
    z = embed_tokens(raw, params, config)
    masks = schedule.masks if isinstance(schedule, MaskSchedule) else list(schedule)
    mask_prev = full_mask(config.patches)
    counts = []
    for j in range(config.layers):
        counter = MacCounter()
        z, _, _ = pruned_block_forward_gather(
            z, mask_prev, masks[j], params, config, j, counter
        )
        counts.append((counter.msa, counter.mlp))
        mask_prev = masks[j]
    return counts
