"""Gradients, optimizers, synthetic data, and the fine-tuning loops.

The toy task: each class owns a small set of prototype token vectors
(centered per class so mean-pooling carries almost no label signal). A sample
scatters the class prototypes over random positions among Gaussian noise
tokens, so classification requires locating and aggregating the informative
positions; that is what makes most patches genuinely prunable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import val
from .errors import NumericOverflowError, ShapeError
from .model import (
    MaskSchedule,
    ModelConfig,
    full_mask,
    init_params,
    layer_tensor_names,
    pruned_block_forward,
    run_model,
    tensor_names,
)
from .numerics import Rng, frobenius_sq


# ---------------------------------------------------------------------------
# toy data
# ---------------------------------------------------------------------------


@dataclass
class ToyDatasetSpec:
    num_classes: int = 10
    tokens_per_sample: int = 16
    token_dim: int = 16
    informative_tokens: int = 3
    noise_scale: float = 0.5
    prototype_seed: int = 1234
    sample_count: int = 4096

    def __post_init__(self):
        if self.informative_tokens >= self.tokens_per_sample:
            raise ShapeError(
                f"informative tokens ({self.informative_tokens}) must be fewer "
                f"than tokens per sample ({self.tokens_per_sample})"
            )

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "tokens_per_sample": self.tokens_per_sample,
            "token_dim": self.token_dim,
            "informative_tokens": self.informative_tokens,
            "noise_scale": self.noise_scale,
            "prototype_seed": self.prototype_seed,
            "sample_count": self.sample_count,
        }


@dataclass
class Batch:
    inputs: np.ndarray  # (S, tokens, token_dim)
    labels: np.ndarray  # (S,) int

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ShapeError(
                f"{self.inputs.shape[0]} inputs vs {self.labels.shape[0]} labels"
            )

    @property
    def size(self) -> int:
        return self.labels.shape[0]

    def take(self, indices) -> "Batch":
        idx = np.asarray(indices, dtype=int)
        return Batch(self.inputs[idx], self.labels[idx])


def class_prototypes(spec: ToyDatasetSpec) -> np.ndarray:
    """(num_classes, informative_tokens, token_dim); zero mean within each class."""
    rng = Rng(spec.prototype_seed)
    protos = rng.normal(1.0, (spec.num_classes, spec.informative_tokens, spec.token_dim))
    return protos - protos.mean(axis=1, keepdims=True)


def gen_toy_dataset(spec: ToyDatasetSpec, seed: int) -> Batch:
    """Deterministic toy batch: prototypes at random positions among noise tokens."""
    rng = Rng(seed)
    protos = class_prototypes(spec)
    s, t = spec.sample_count, spec.tokens_per_sample
    labels = rng.integers(0, spec.num_classes, s)
    inputs = rng.normal(1.0, (s, t, spec.token_dim)) * spec.noise_scale
    for i in range(s):
        positions = rng.choice(t, spec.informative_tokens, replace=False)
        order = rng.permutation(spec.informative_tokens)
        inputs[i, positions] = protos[labels[i]][order]
    return Batch(inputs, labels)


def split_batch(batch: Batch, holdout: int, seed: int) -> tuple:
    """(train, heldout) split with a seeded shuffle."""
    order = Rng(seed).permutation(batch.size)
    return batch.take(order[holdout:]), batch.take(order[:holdout])


def linear_probe_accuracy(batch: Batch, num_classes: int) -> float:
    """Least-squares one-hot classifier on the mean token (in-sample accuracy)."""
    x = batch.inputs.mean(axis=1)
    x = np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)
    y = np.zeros((x.shape[0], num_classes))
    y[np.arange(x.shape[0]), batch.labels] = 1.0
    w, *_ = np.linalg.lstsq(x, y, rcond=None)
    pred = np.argmax(x @ w, axis=1)
    return float((pred == batch.labels).mean())


def accuracy_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((np.argmax(logits, axis=-1) == np.asarray(labels)).mean())


# ---------------------------------------------------------------------------
# losses and gradients
# ---------------------------------------------------------------------------


@dataclass
class ReconstructionTask:
    """Feature-matching objective: run a span of blocks, compare masked rows.

    ``block_masks[i]`` is the (mask_in, mask_out) pair of block
    ``start_block + i``. The error compares the final output against
    ``target_features`` on ``error_mask`` rows; ``normalizer`` (if set)
    divides the raw mean squared Frobenius error.
    """

    start_block: int
    input_features: np.ndarray
    target_features: np.ndarray
    error_mask: np.ndarray
    block_masks: list
    normalizer: float | None = None


def masked_error_normalizer(target_features: np.ndarray, mask) -> float:
    """Mean squared Frobenius norm of the masked reference rows."""
    masked = target_features * np.asarray(mask, dtype=np.float64)[:, None]
    return frobenius_sq(masked) / target_features.shape[0]


def reconstruction_loss(params, config: ModelConfig, task: ReconstructionTask):
    z = task.input_features
    for i, (m_in, m_out) in enumerate(task.block_masks):
        z, _, _ = pruned_block_forward(z, m_in, m_out, params, config, task.start_block + i)
    diff = ad.sub(z, task.target_features)
    masked = ad.mul(diff, np.asarray(task.error_mask, dtype=np.float64)[:, None])
    denom = task.input_features.shape[0]
    if task.normalizer:
        denom = denom * task.normalizer
    return ad.scale(ad.sum_all(ad.square(masked)), 1.0 / denom)


def cross_entropy_loss(params, config: ModelConfig, batch: Batch, schedule=None):
    logits, *_ = run_model(batch.inputs, params, config, schedule)
    return ad.cross_entropy_mean(logits, batch.labels)


def _build_loss(params, config, loss, batch, schedule, task):
    if loss == "cross_entropy":
        return cross_entropy_loss(params, config, batch, schedule)
    if loss == "reconstruction":
        return reconstruction_loss(params, config, task)
    raise ValueError(f"unknown loss {loss!r}")


def loss_value(
    params, config: ModelConfig, loss="cross_entropy", batch=None, schedule=None, task=None
) -> float:
    return float(val(_build_loss(params, config, loss, batch, schedule, task)))


def param_gradients(
    params,
    config: ModelConfig,
    loss="cross_entropy",
    batch=None,
    schedule=None,
    task=None,
    tensors=None,
) -> tuple:
    """Exact reverse-mode gradients. Returns (loss, {name: grad}) over `tensors`
    (all tensors when omitted); untouched computations get zero gradients."""
    wanted = list(tensors) if tensors is not None else tensor_names(config)
    wrapped = dict(params)
    for name in wanted:
        wrapped[name] = ad.Var(params[name])
    loss_var = _build_loss(wrapped, config, loss, batch, schedule, task)
    loss_val = float(val(loss_var))
    if not np.isfinite(loss_val):
        raise NumericOverflowError(f"{loss} loss is non-finite")
    ad.backward(loss_var)
    grads = {}
    for name in wanted:
        g = wrapped[name].grad
        grads[name] = np.zeros_like(params[name]) if g is None else g
    return loss_val, grads


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


@dataclass
class OptimizerConfig:
    kind: str = "sgd"  # "sgd" (with momentum) or "adam"
    lr: float = 0.05
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class OptimizerState:
    """Per-tensor accumulators; `update` returns fresh parameter arrays."""

    def __init__(self, config: OptimizerConfig):
        self.config = config
        self.step = 0
        self.m: dict = {}
        self.v: dict = {}

    def update(self, params: dict, grads: dict) -> dict:
        cfg = self.config
        self.step += 1
        out = dict(params)
        for name, g in grads.items():
            if cfg.kind == "sgd":
                buf = self.m.get(name)
                buf = g if buf is None else cfg.momentum * buf + g
                self.m[name] = buf
                out[name] = params[name] - cfg.lr * buf
            elif cfg.kind == "adam":
                m = self.m.get(name, 0.0) * cfg.beta1 + (1 - cfg.beta1) * g
                v = self.v.get(name, 0.0) * cfg.beta2 + (1 - cfg.beta2) * g * g
                self.m[name], self.v[name] = m, v
                mh = m / (1 - cfg.beta1**self.step)
                vh = v / (1 - cfg.beta2**self.step)
                out[name] = params[name] - cfg.lr * mh / (np.sqrt(vh) + cfg.eps)
            else:
                raise ValueError(f"unknown optimizer {cfg.kind!r}")
        return out


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


def evaluate(params, config: ModelConfig, batch: Batch, schedule=None, chunk: int = 512) -> dict:
    """Accuracy and mean cross-entropy over a batch (chunked forward)."""
    total, correct, loss_sum = 0, 0, 0.0
    for start in range(0, batch.size, chunk):
        sub = batch.take(np.arange(start, min(start + chunk, batch.size)))
        logits, *_ = run_model(sub.inputs, params, config, schedule)
        logits = val(logits)
        loss_sum += float(val(ad.cross_entropy_mean(logits, sub.labels))) * sub.size
        correct += int((np.argmax(logits, axis=1) == sub.labels).sum())
        total += sub.size
    return {"accuracy": correct / total, "loss": loss_sum / total}


def _train_loop(params, config, batch, schedule, opt_cfg, epochs, seed, batch_size):
    params = dict(params)
    state = OptimizerState(opt_cfg)
    rng = Rng(seed)
    log = []
    for epoch in range(epochs):
        order = rng.permutation(batch.size)
        loss_sum = 0.0
        for start in range(0, batch.size, batch_size):
            sub = batch.take(order[start : start + batch_size])
            try:
                loss, grads = param_gradients(params, config, batch=sub, schedule=schedule)
            except NumericOverflowError as err:
                raise NumericOverflowError(
                    f"training diverged at epoch {epoch}, step {start // batch_size}: {err}"
                ) from err
            params = state.update(params, grads)
            loss_sum += loss * sub.size
        stats = evaluate(params, config, batch, schedule)
        log.append(
            {"epoch": epoch, "loss": loss_sum / batch.size, "accuracy": stats["accuracy"]}
        )
    return params, log


def train_model(
    config: ModelConfig,
    batch: Batch,
    opt_cfg: OptimizerConfig | None = None,
    epochs: int = 30,
    seed: int = 0,
    batch_size: int = 64,
) -> tuple:
    """Train from scratch; deterministic for a fixed seed. Returns (params, log)."""
    opt_cfg = opt_cfg or OptimizerConfig()
    rng = Rng(seed)
    params = init_params(config, rng.child(0))
    return _train_loop(params, config, batch, None, opt_cfg, epochs, rng.child(1).seed, batch_size)


def finetune_full(
    params,
    config: ModelConfig,
    schedule: MaskSchedule,
    batch: Batch,
    opt_cfg: OptimizerConfig | None = None,
    epochs: int = 10,
    seed: int = 0,
    batch_size: int = 64,
) -> tuple:
    """Cross-entropy fine-tune of all tensors with the mask schedule active."""
    opt_cfg = opt_cfg or OptimizerConfig(lr=0.01)
    if epochs == 0:
        return dict(params), []
    return _train_loop(params, config, batch, schedule, opt_cfg, epochs, seed, batch_size)


def block_reconstruction_task(
    layer: int,
    config: ModelConfig,
    schedule: MaskSchedule,
    reference_features: list,
    normalize: bool = True,
) -> ReconstructionTask:
    """The two-block objective used while selecting masks for `layer`.

    Runs blocks `layer` and `layer + 1` from the reference features entering
    `layer`, and compares against the reference output of `layer + 1` on that
    block's output mask.
    """
    if layer + 1 >= config.layers:
        raise ShapeError(f"block {layer} has no deeper block to score against")
    ones = full_mask(config.patches)
    mask_in = schedule.masks[layer - 1] if layer > 0 else ones
    target = reference_features[layer + 2]
    error_mask = schedule.masks[layer + 1]
    normalizer = masked_error_normalizer(target, error_mask) if normalize else None
    return ReconstructionTask(
        start_block=layer,
        input_features=reference_features[layer],
        target_features=target,
        error_mask=error_mask,
        block_masks=[
            (mask_in, schedule.masks[layer]),
            (schedule.masks[layer], schedule.masks[layer + 1]),
        ],
        normalizer=normalizer,
    )


def finetune_block(
    layer: int,
    params,
    config: ModelConfig,
    task: ReconstructionTask,
    epochs: int = 3,
    opt_cfg: OptimizerConfig | None = None,
    seed: int = 0,
    batch_size: int = 32,
) -> tuple:
    """Minimize the reconstruction task over block-`layer` tensors only.

    Reverts to the incoming weights when the final loss exceeds the initial
    one. Returns (params, initial_loss, final_loss).
    """
    opt_cfg = opt_cfg or OptimizerConfig(kind="adam", lr=1e-2)
    names = layer_tensor_names(config, layer)
    initial = loss_value(params, config, "reconstruction", task=task)
    if epochs == 0 or initial == 0.0:
        return dict(params), initial, initial
    tuned = dict(params)
    state = OptimizerState(opt_cfg)
    rng = Rng(seed)
    size = task.input_features.shape[0]
    for _ in range(epochs):
        order = rng.permutation(size)
        for start in range(0, size, batch_size):
            idx = order[start : start + batch_size]
            sub = ReconstructionTask(
                task.start_block,
                task.input_features[idx],
                task.target_features[idx],
                task.error_mask,
                task.block_masks,
                task.normalizer,
            )
            _, grads = param_gradients(
                tuned, config, "reconstruction", task=sub, tensors=names
            )
            tuned = state.update(tuned, grads)
    final = loss_value(tuned, config, "reconstruction", task=task)
    if final > initial:
        return dict(params), initial, initial
    return tuned, initial, final
