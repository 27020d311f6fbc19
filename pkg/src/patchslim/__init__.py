"""Patch-level pruning toolkit for tiny vision transformers."""

from .costmodel import CostReport, block_cost, instrumented_mac_count, schedule_cost
from .dynamic import (
    PredictorParams,
    dynamic_model_forward,
    evaluate_dynamic,
    predictor_forward,
    train_predictors,
)
from .errors import (
    FormatError,
    MaskNestingError,
    NumericOverflowError,
    ShapeError,
    UndefinedStatisticError,
)
from .model import (
    ForwardTrace,
    MaskSchedule,
    ModelConfig,
    block_forward,
    class_only_mask,
    embed_tokens,
    full_mask,
    init_params,
    model_forward,
    partial_schedule,
    pruned_block_forward,
    single_layer_pruned_forward,
)
from .numerics import Rng
from .pruner import (
    PruneReport,
    PruneResult,
    PrunerConfig,
    prune_topdown,
    reconstruction_error,
    select_layer_mask,
    uniform_mask_schedule,
)
from .scoring import (
    ScoreVector,
    attn_norm_scores,
    layer_similarity_profile,
    random_scores,
    significance_exact_oracle,
    significance_scores,
)
from .training import (
    Batch,
    OptimizerConfig,
    ToyDatasetSpec,
    evaluate,
    finetune_block,
    finetune_full,
    gen_toy_dataset,
    param_gradients,
    train_model,
)

__version__ = "0.1.0"
