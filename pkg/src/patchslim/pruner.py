"""Top-down mask construction under a reconstruction-error budget.

Masks are selected from the last block to the first. Each block starts from
the deeper block's mask and adds patches in score order, `granularity` at a
time, fine-tuning the block after every addition, until the next block's
masked reconstruction error (relative by default) drops under `epsilon` or
the mask saturates at all-ones (flagged in the report). Reference features
always come from the unpruned starting weights.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .costmodel import schedule_cost
from .errors import ShapeError
from .model import (
    MaskSchedule,
    ModelConfig,
    class_only_mask,
    full_mask,
    kept_count,
    model_forward,
)
from .numerics import Rng, frobenius_sq
from .scoring import attn_norm_scores, random_scores, significance_scores
from .training import (
    Batch,
    OptimizerConfig,
    block_reconstruction_task,
    finetune_block,
    loss_value,
    masked_error_normalizer,
)

SCORERS = ("significance", "random", "attn_norm")


@dataclass
class PrunerConfig:
    epsilon: float = 0.01
    granularity: int = 10
    finetune_epochs: int = 3
    calibration_size: int = 256
    scorer: str = "significance"
    normalize_error: bool = True
    finetune_lr: float = 1e-2
    finetune_batch: int = 32

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ShapeError(f"epsilon must be positive, got {self.epsilon}")
        if self.granularity < 1:
            raise ShapeError(f"granularity must be >= 1, got {self.granularity}")
        if self.scorer not in SCORERS:
            raise ShapeError(f"scorer must be one of {SCORERS}, got {self.scorer!r}")

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "granularity": self.granularity,
            "finetune_epochs": self.finetune_epochs,
            "calibration_size": self.calibration_size,
            "scorer": self.scorer,
            "normalize_error": self.normalize_error,
            "finetune_lr": self.finetune_lr,
            "finetune_batch": self.finetune_batch,
        }


@dataclass
class LayerRecord:
    layer: int
    kept: int
    error: float | None  # None when the budget loop never ran
    steps: int
    budget_met: bool

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "kept": self.kept,
            "error": self.error,
            "steps": self.steps,
            "budget_met": self.budget_met,
        }


@dataclass
class PruneReport:
    layer_records: list
    kept_counts: list
    total_steps: int
    macs_before: int
    macs_after: int
    reduction_percent: float
    wall_time_seconds: float | None = None

    def to_dict(self, include_wall_time: bool = False) -> dict:
        out = {
            "layers": [r.to_dict() for r in sorted(self.layer_records, key=lambda r: r.layer)],
            "kept_counts": self.kept_counts,
            "total_steps": self.total_steps,
            "macs_before": self.macs_before,
            "macs_after": self.macs_after,
            "reduction_percent": self.reduction_percent,
        }
        # wall time is non-deterministic; keep it out of written artifacts
        if include_wall_time:
            out["wall_time_seconds"] = self.wall_time_seconds
        return out


@dataclass
class PruneResult:
    schedule: MaskSchedule
    report: PruneReport
    params: dict  # weights after the per-block fine-tunes


def reconstruction_error(
    reference_features: list,
    params,
    config: ModelConfig,
    schedule,
    feature_layer: int,
    batch: Batch,
    normalize: bool = True,
) -> float:
    """Mean masked squared error at one feature level, via a full pruned forward.

    Compares the pruned model's features[feature_layer] against the reference
    on the rows kept by that level's mask (the output mask of block
    feature_layer - 1), divided by the reference's masked energy when
    `normalize` is set.
    """
    if batch.size == 0:
        raise ShapeError("empty calibration set")
    masks = schedule.masks if isinstance(schedule, MaskSchedule) else list(schedule)
    if not 1 <= feature_layer <= len(masks):
        raise ShapeError(f"feature level {feature_layer} out of range 1..{len(masks)}")
    mask = np.asarray(masks[feature_layer - 1], dtype=np.float64)
    trace = model_forward(batch.inputs, params, config, schedule)
    diff = (trace.features[feature_layer] - reference_features[feature_layer]) * mask[:, None]
    err = frobenius_sq(diff) / batch.size
    if normalize:
        denom = masked_error_normalizer(reference_features[feature_layer], mask)
        if denom > 0.0:
            err = err / denom
    return err


def top_score_union(base_mask: np.ndarray, scores: np.ndarray, r: int) -> np.ndarray:
    """Union of `base_mask` with the top-r score positions (ties: lower index)."""
    mask = np.asarray(base_mask, dtype=np.float64).copy()
    if r > 0:
        order = np.argsort(-np.asarray(scores), kind="stable")
        mask[order[:r]] = 1.0
    return mask


def select_layer_mask(
    layer: int,
    params: dict,
    config: ModelConfig,
    masks: list,
    scores: np.ndarray,
    pruner_config: PrunerConfig,
    reference_features: list,
    seed: int = 0,
):
    """Grow block `layer`'s mask until the deeper block's error meets epsilon.

    `masks` is the working schedule: deeper entries fixed, shallower all-ones.
    Starts from the deeper mask with r = 0 additions; each iteration unions in
    the next `granularity` top-scoring patches, fine-tunes the block (when
    enabled), and re-measures. Stops on budget or at all-ones (flagged).
    Returns (mask, params, LayerRecord).
    """
    n = config.patches
    mask = masks[layer + 1].copy()
    masks[layer] = mask
    current = dict(params)
    err = math.inf
    record_err = None
    steps = 0
    met = True
    r = 0
    opt = OptimizerConfig(kind="adam", lr=pruner_config.finetune_lr)
    rng = Rng(seed)
    while err > pruner_config.epsilon:
        mask = top_score_union(masks[layer + 1], scores, r)
        masks[layer] = mask
        schedule = MaskSchedule(masks)
        task = block_reconstruction_task(
            layer, config, schedule, reference_features, pruner_config.normalize_error
        )
        if pruner_config.finetune_epochs > 0:
            current, _, err = finetune_block(
                layer,
                current,
                config,
                task,
                epochs=pruner_config.finetune_epochs,
                opt_cfg=opt,
                seed=rng.child(steps).seed,
                batch_size=pruner_config.finetune_batch,
            )
        else:
            err = loss_value(current, config, "reconstruction", task=task)
        record_err = err
        steps += 1
        if err <= pruner_config.epsilon:
            break
        if kept_count(mask) == n:
            met = False
            break
        r += pruner_config.granularity
    record = LayerRecord(layer, kept_count(mask), record_err, steps, met)
    return mask, current, record


def _layer_scores(scorer, trace, masks, layer, rng):
    if scorer == "significance":
        return significance_scores(trace, masks[layer + 1 :], layer).values
    if scorer == "random":
        return random_scores(len(masks[layer]), rng.seed, layer).values
    if scorer == "attn_norm":
        return attn_norm_scores(trace, layer).values
    raise ShapeError(f"unknown scorer {scorer!r}")


def prune_topdown(
    params: dict, config: ModelConfig, batch: Batch, pruner_config: PrunerConfig, seed: int
) -> PruneResult:
    """Build a nested schedule from the last block to the first.

    The last mask keeps only the class token. For each earlier block a fresh
    calibration subset is drawn, scores are computed on the partially pruned
    model, and the mask is grown by `select_layer_mask`. Returns the schedule,
    a report, and the block-fine-tuned weights.
    """
    start = time.perf_counter()
    rng = Rng(seed)
    n, layers = config.patches, config.layers
    masks = [full_mask(n) for _ in range(layers)]
    masks[layers - 1] = class_only_mask(n)
    original = dict(params)
    current = dict(params)
    records = [LayerRecord(layers - 1, 1, None, 0, True)]
    for layer in range(layers - 2, -1, -1):
        layer_rng = rng.child(layer)
        take = min(pruner_config.calibration_size, batch.size)
        calib = batch.take(layer_rng.child(0).choice(batch.size, take, replace=False))
        reference = model_forward(calib.inputs, original, config).features
        partial = model_forward(calib.inputs, current, config, MaskSchedule(masks))
        scores = _layer_scores(
            pruner_config.scorer, partial, masks, layer, layer_rng.child(1)
        )
        mask, current, record = select_layer_mask(
            layer,
            current,
            config,
            masks,
            scores,
            pruner_config,
            reference,
            seed=layer_rng.child(2).seed,
        )
        masks[layer] = mask
        records.append(record)
    schedule = MaskSchedule(masks)
    before = schedule_cost(config)
    after = schedule_cost(config, schedule)
    report = PruneReport(
        layer_records=records,
        kept_counts=schedule.kept_counts(),
        total_steps=sum(r.steps for r in records),
        macs_before=before.total_macs,
        macs_after=after.total_macs,
        reduction_percent=after.reduction_percent,
        wall_time_seconds=time.perf_counter() - start,
    )
    return PruneResult(schedule, report, current)


def uniform_mask_schedule(
    params: dict,
    config: ModelConfig,
    batch: Batch,
    rate: float,
    scorer: str = "significance",
    seed: int = 0,
    samples: int = 256,
) -> MaskSchedule:
    """Same kept budget in every block, repaired to the nearest nested schedule.

    Every block keeps ceil((1 - rate) * N) patches: the class token plus the
    top-scoring others at that block. Nesting is then repaired by intersecting
    cumulatively from the first block down, so deeper masks only shrink.
    """
    if not 0.0 < rate < 1.0:
        raise ShapeError(f"pruning rate must be in (0, 1), got {rate}")
    n, layers = config.patches, config.layers
    budget = max(1, math.ceil((1.0 - rate) * n))
    rng = Rng(seed)
    take = min(samples, batch.size)
    calib = batch.take(rng.child(0).choice(batch.size, take, replace=False))
    masks = [full_mask(n) for _ in range(layers)]
    masks[layers - 1] = class_only_mask(n)
    trace = model_forward(calib.inputs, params, config, MaskSchedule(masks))
    chosen = []
    for layer in range(layers):
        if budget >= n:
            chosen.append(full_mask(n))
            continue
        if layer < layers - 1 and scorer != "random":
            scores = _layer_scores(scorer, trace, masks, layer, rng.child(layer + 1))
        elif scorer == "random":
            scores = random_scores(n, rng.child(layer + 1).seed, layer).values
        else:
            # deepest block has no deeper maps; use its received-attention mass
            scores = attn_norm_scores(trace, layer).values
        order = np.argsort(-scores[1:], kind="stable") + 1
        mask = class_only_mask(n)
        mask[order[: budget - 1]] = 1.0
        chosen.append(mask)
    repaired = [chosen[0]]
    for layer in range(1, layers):
        repaired.append(np.minimum(chosen[layer], repaired[layer - 1]))
    return MaskSchedule(repaired)
