"""Patch significance scores, baseline scorers, and the similarity profile.

The significance of patch i at block t measures how much it can move the
masked output of the final block: the squared column norm of a propagator
built from the deeper attention maps (rows zeroed by each deeper mask),
times the squared row norm of the block-t attention applied to |Z|.

The propagator collapses heads by summing each deeper block's maps before
multiplying; the literal head-tuple enumeration is kept as `significance_
exact_oracle` (test-scale only) and matches the fast path exactly for H=1.
Both paths multiply deepest-first, i.e. A = (D_L P_L)(D_{L-1} P_{L-1})...,
so deep-dropped rows of A are zero.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .model import ForwardTrace
from .numerics import Rng, mean_pairwise_cosine


@dataclass
class ScoreVector:
    layer: int
    values: np.ndarray  # (N,) nonnegative
    sample_count: int


@dataclass
class ScoreIntermediates:
    propagator: np.ndarray  # (S, N, N) head-collapsed, masked product
    local_terms: np.ndarray  # (S, H, N, d) attention applied to |Z|


def _check_layer(trace: ForwardTrace, layer: int) -> None:
    if trace.samples == 0:
        raise ShapeError("empty sample set")
    if not 0 <= layer < trace.layers - 1:
        raise ShapeError(
            f"layer {layer} out of scoring range 0..{trace.layers - 2} "
            f"(the last block has nothing deeper to propagate through)"
        )


def collapsed_propagator(trace: ForwardTrace, deeper_masks, layer: int) -> np.ndarray:
    """(S, N, N) product of masked, head-summed attention maps of deeper blocks."""
    _check_layer(trace, layer)
    deeper = list(deeper_masks)
    if len(deeper) != trace.layers - 1 - layer:
        raise ShapeError(
            f"expected {trace.layers - 1 - layer} deeper masks, got {len(deeper)}"
        )
    prop = None
    for j in range(trace.layers - 1, layer, -1):
        mask = np.asarray(deeper[j - layer - 1], dtype=np.float64)
        term = trace.attention[j].sum(axis=1) * mask[..., :, None]
        prop = term if prop is None else prop @ term
    return prop


def local_attention_terms(trace: ForwardTrace, layer: int) -> np.ndarray:
    """(S, H, N, d) per-head attention maps applied to |Z| entering the block."""
    z_abs = np.abs(trace.features[layer])  # (S, N, d)
    return np.matmul(trace.attention[layer], z_abs[:, None, :, :])


def score_intermediates(trace, deeper_masks, layer: int) -> ScoreIntermediates:
    return ScoreIntermediates(
        propagator=collapsed_propagator(trace, deeper_masks, layer),
        local_terms=local_attention_terms(trace, layer),
    )


def significance_per_sample(trace, deeper_masks, layer: int) -> np.ndarray:
    """(S, N) per-input significance values (fast factorized path)."""
    prop = collapsed_propagator(trace, deeper_masks, layer)
    col_sq = np.sum(prop * prop, axis=-2)  # (S, N)
    local = local_attention_terms(trace, layer)
    local_sq = np.sum(local * local, axis=-1).sum(axis=1)  # (S, N), summed over heads
    return col_sq * local_sq


def significance_scores(trace, deeper_masks, layer: int) -> ScoreVector:
    """Mean significance over the trace's samples."""
    per_sample = significance_per_sample(trace, deeper_masks, layer)
    return ScoreVector(layer, per_sample.mean(axis=0), trace.samples)


def significance_exact_oracle(
    trace,
    deeper_masks,
    layer: int,
    collapse_heads: bool = False,
    tuple_guard: int = 4096,
) -> ScoreVector:
    """Literal head-tuple enumeration of the significance sum (test oracle).

    Sums squared propagator column norms over every choice of one head per
    deeper block (or over the single head-summed map per block when
    `collapse_heads`), times the head-summed local squared row norms.
    """
    _check_layer(trace, layer)
    deeper = [np.asarray(m, dtype=np.float64) for m in deeper_masks]
    if len(deeper) != trace.layers - 1 - layer:
        raise ShapeError(
            f"expected {trace.layers - 1 - layer} deeper masks, got {len(deeper)}"
        )
    # maps per deeper block, deepest block first
    per_block_maps = []
    for j in range(trace.layers - 1, layer, -1):
        attn = trace.attention[j]
        maps = [attn.sum(axis=1)] if collapse_heads else [attn[:, h] for h in range(attn.shape[1])]
        mask = deeper[j - layer - 1]
        per_block_maps.append([m * mask[..., :, None] for m in maps])
    n_tuples = 1
    for maps in per_block_maps:
        n_tuples *= len(maps)
    if n_tuples > tuple_guard:
        raise ShapeError(f"{n_tuples} head tuples exceed the oracle guard {tuple_guard}")

    col_sq = np.zeros(trace.features[layer].shape[:2])  # (S, N)
    for combo in itertools.product(*per_block_maps):
        prop = None
        for term in combo:  # deepest first, multiplied left to right
            prop = term if prop is None else prop @ term
        col_sq = col_sq + np.sum(prop * prop, axis=-2)
    local = local_attention_terms(trace, layer)
    local_sq = np.sum(local * local, axis=-1).sum(axis=1)
    return ScoreVector(layer, (col_sq * local_sq).mean(axis=0), trace.samples)


def random_scores(n: int, seed: int, layer: int = -1) -> ScoreVector:
    """Uniform(0,1) baseline scores."""
    return ScoreVector(layer, Rng(seed).uniform((n,)), 0)


def attn_norm_scores(trace, layer: int) -> ScoreVector:
    """Current-block-only baseline: attention mass received by each patch."""
    if not 0 <= layer < trace.layers:
        raise ShapeError(f"layer {layer} out of range 0..{trace.layers - 1}")
    attn = trace.attention[layer]  # (S, H, N, N)
    per_sample = np.sum(attn * attn, axis=-2).sum(axis=1)  # (S, N)
    return ScoreVector(layer, per_sample.mean(axis=0), trace.samples)


def layer_similarity_profile(traces) -> np.ndarray:
    """Per-feature-level mean pairwise cosine over non-class rows, averaged
    over inputs. Entry k covers features[k], k = 0..L."""
    if isinstance(traces, ForwardTrace):
        traces = [traces]
    if not traces:
        raise ShapeError("need at least one trace")
    levels = len(traces[0].features)
    sums = np.zeros(levels)
    count = 0
    for trace in traces:
        for s in range(trace.samples):
            for k in range(levels):
                sums[k] += mean_pairwise_cosine(trace.features[k][s, 1:, :])
            count += 1
    return sums / count
