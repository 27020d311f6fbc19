"""Per-input patch selection via lightweight score predictors.

Each block gets a tiny predictor: grouped mean-pooling over the embedding
dims, a linear map to one scalar per patch, and softplus. Predictors are
trained to regress log1p of the per-instance significance values, then drive
top-k selection at inference under fixed per-layer budgets (taken from a
static schedule so the two variants cost the same).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import autodiff as ad
from .autodiff import val
from .errors import ShapeError
from .model import (
    ForwardTrace,
    MaskSchedule,
    ModelConfig,
    embed_tokens,
    model_forward,
    partial_schedule,
    pruned_block_forward,
)
from .numerics import Rng
from .scoring import significance_per_sample
from .training import Batch, OptimizerConfig, OptimizerState


def default_group_size(dim: int) -> int:
    return max(dim // 16, 1)


@dataclass
class PredictorParams:
    group_size: int
    tensors: dict  # "pred.{l}.W": (dim/group, 1), "pred.{l}.b": (1,)

    def layer_names(self, layer: int) -> list:
        return [f"pred.{layer}.W", f"pred.{layer}.b"]

    def has_layer(self, layer: int) -> bool:
        return f"pred.{layer}.W" in self.tensors


def init_predictors(config: ModelConfig, rng: Rng, group_size: int | None = None) -> PredictorParams:
    """One predictor per block that has deeper blocks to score against."""
    g = group_size or default_group_size(config.dim)
    if config.dim % g != 0:
        raise ShapeError(f"dim {config.dim} not divisible by group size {g}")
    tensors = {}
    for layer in range(config.layers - 1):
        tensors[f"pred.{layer}.W"] = rng.normal(1.0 / np.sqrt(config.dim // g), (config.dim // g, 1))
        tensors[f"pred.{layer}.b"] = np.zeros(1)
    return PredictorParams(g, tensors)


def pool_matrix(dim: int, group_size: int) -> np.ndarray:
    """(dim, dim/group) mean-pooling projection over contiguous groups."""
    cols = dim // group_size
    m = np.zeros((dim, cols))
    for c in range(cols):
        m[c * group_size : (c + 1) * group_size, c] = 1.0 / group_size
    return m


def predictor_scores(z_prev, predictors: PredictorParams, layer: int):
    """(S, N, 1) nonnegative scores; autodiff-transparent."""
    pool = pool_matrix(val(z_prev).shape[-1], predictors.group_size)
    pooled = ad.matmul(z_prev, pool)
    lin = ad.add(
        ad.matmul(pooled, predictors.tensors[f"pred.{layer}.W"]),
        predictors.tensors[f"pred.{layer}.b"],
    )
    return ad.softplus(lin)


def predictor_forward(z_prev, predictors: PredictorParams, layer: int) -> np.ndarray:
    """(S, N) predicted significance for each patch of each input."""
    return val(predictor_scores(z_prev, predictors, layer))[..., 0]


def predictor_targets(params, config: ModelConfig, schedule: MaskSchedule, batch: Batch):
    """Per-instance regression targets and inputs for every predictor layer.

    For block t the trace comes from the model pruned only at deeper blocks;
    targets are log1p of the per-instance significance. Returns
    (inputs per layer, targets per layer).
    """
    inputs, targets = [], []
    for layer in range(config.layers - 1):
        trace = model_forward(batch.inputs, params, config, partial_schedule(schedule, layer))
        s = significance_per_sample(trace, schedule.masks[layer + 1 :], layer)
        inputs.append(trace.features[layer])
        targets.append(np.log1p(s))
    return inputs, targets


def train_predictors(
    params,
    config: ModelConfig,
    schedule: MaskSchedule,
    batch: Batch,
    epochs: int = 40,
    seed: int = 0,
    lr: float = 5e-2,
    batch_size: int = 256,
) -> tuple:
    """Fit each block's predictor by MSE against log1p per-instance scores.

    Model weights stay frozen; only predictor tensors move. Returns
    (PredictorParams, per-layer final losses).
    """
    rng = Rng(seed)
    predictors = init_predictors(config, rng.child(0))
    if epochs == 0:
        return predictors, []
    inputs, targets = predictor_targets(params, config, schedule, batch)
    losses = []
    for layer in range(config.layers - 1):
        x, y = inputs[layer], targets[layer][..., None]
        names = predictors.layer_names(layer)
        state = OptimizerState(OptimizerConfig(kind="adam", lr=lr))
        order_rng = rng.child(layer + 1)
        for _ in range(epochs):
            order = order_rng.permutation(x.shape[0])
            for start in range(0, x.shape[0], batch_size):
                idx = order[start : start + batch_size]
                wrapped = dict(predictors.tensors)
                for name in names:
                    wrapped[name] = ad.Var(predictors.tensors[name])
                pred = predictor_scores(
                    x[idx], PredictorParams(predictors.group_size, wrapped), layer
                )
                diff = ad.sub(pred, y[idx])
                loss = ad.scale(ad.sum_all(ad.square(diff)), 1.0 / diff.shape[0])
                ad.backward(loss)
                grads = {name: wrapped[name].grad for name in names}
                grads = {k: (g if g is not None else 0.0) for k, g in grads.items()}
                predictors.tensors.update(state.update(predictors.tensors, grads))
        final_pred = predictor_forward(x, predictors, layer)
        losses.append(float(np.mean((final_pred - targets[layer]) ** 2)))
    return predictors, losses


def select_topk_masks(scores: np.ndarray, prev_mask: np.ndarray, budget: int) -> tuple:
    """Per-input top-k among previously kept patches, class token always first.

    Returns (masks (S, N), clamped) where `clamped` counts inputs whose
    previous mask had fewer candidates than the budget.
    """
    s, n = scores.shape
    masks = np.zeros((s, n))
    masks[:, 0] = 1.0
    take = budget - 1
    candidates = (prev_mask > 0) & (np.arange(n)[None, :] != 0)
    ranked = np.where(candidates, scores, -np.inf)
    order = np.argsort(-ranked, axis=1, kind="stable")
    clamped = 0
    if take > 0:
        avail = candidates.sum(axis=1)
        clamped = int((avail < take).sum())
        for i in range(s):
            k = min(take, avail[i])
            masks[i, order[i, :k]] = 1.0
    return masks, clamped


def dynamic_model_forward(
    raw_tokens, params, config: ModelConfig, predictors: PredictorParams, budgets
) -> tuple:
    """Per-input pruned forward under fixed budgets.

    Budgets must be non-increasing with depth and >= 1. Blocks without a
    predictor (only the last can lack one) reuse the previous block's scores.
    Returns (trace, per-block (S, N) masks, clamp count).
    """
    budgets = [int(b) for b in budgets]
    if len(budgets) != config.layers:
        raise ShapeError(f"{len(budgets)} budgets for {config.layers} blocks")
    if any(b < 1 for b in budgets):
        raise ShapeError("budgets must be >= 1")
    if any(budgets[j + 1] > budgets[j] for j in range(len(budgets) - 1)):
        raise ShapeError("budgets must be non-increasing with depth")
    raw = np.asarray(raw_tokens, dtype=np.float64)
    if raw.ndim == 2:
        raw = raw[None]
    n = config.patches
    z = embed_tokens(raw, params, config)
    prev = np.ones((raw.shape[0], n))
    features, inters, attention, masks_used = [np.array(z)], [], [], []
    clamped = 0
    scores = None
    for j in range(config.layers):
        if budgets[j] >= n:
            mask = prev.copy()
        else:
            if predictors.has_layer(j):
                scores = predictor_forward(z, predictors, j)
            elif scores is None:
                raise ShapeError(f"no predictor for block {j} and no earlier scores")
            mask, c = select_topk_masks(scores, prev, budgets[j])
            clamped += c
        z, z_inter, attn = pruned_block_forward(z, prev, mask, params, config, j)
        features.append(np.array(z))
        inters.append(np.array(z_inter))
        attention.append(attn)
        masks_used.append(mask)
        prev = mask
    logits = np.matmul(features[-1][:, 0, :], params["head.W"])
    trace = ForwardTrace(features, inters, attention, logits)
    return trace, masks_used, clamped


def evaluate_dynamic(
    params, config: ModelConfig, predictors: PredictorParams, budgets, batch: Batch, chunk: int = 512
) -> dict:
    """Accuracy of the dynamic variant over a batch."""
    total, correct, clamped = 0, 0, 0
    for start in range(0, batch.size, chunk):
        sub = batch.take(np.arange(start, min(start + chunk, batch.size)))
        trace, _, c = dynamic_model_forward(sub.inputs, params, config, predictors, budgets)
        correct += int((np.argmax(trace.logits, axis=1) == sub.labels).sum())
        total += sub.size
        clamped += c
    return {"accuracy": correct / total, "clamped": clamped}


def rank_correlation(predicted: np.ndarray, reference: np.ndarray) -> float:
    """Spearman rank correlation between two flat score vectors."""
    return float(stats.spearmanr(np.ravel(predicted), np.ravel(reference)).statistic)
