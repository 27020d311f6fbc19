"""L-layer vision transformer with patch masking.

Conventions used throughout the package:

* Blocks are indexed 0..L-1. ``features[j]`` is the input of block j and
  ``features[L]`` the final output, so a trace holds L+1 feature matrices.
* Token index 0 is the class token; the classifier reads only its row.
* ``masks[j]`` is the output mask of block j, a float 0/1 vector of length N.
  A schedule is nested when every deeper mask is a subset of the previous one.
  The input mask of block j is ``masks[j-1]`` (all-ones for j=0).
* Pruned rows are kept as explicit zero rows in full N x d buffers (dense
  masking). A dropped row therefore contributes a zero key/value, which still
  sits in every softmax denominator with logit 0. The compact gather path
  reproduces exactly that arithmetic and exists for MAC instrumentation.
* Attention logits are scaled by 1/sqrt(dim), the full embedding width.

The forward code is written against the autodiff ops, so Var-wrapped
parameters yield gradients while plain arrays run tape-free.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import val
from .errors import MaskNestingError, NumericOverflowError, ShapeError
from .numerics import Rng, gelu as np_gelu, layer_norm_rows

LN_EPS = 1e-5


@dataclass
class ModelConfig:
    layers: int
    patches: int  # N, class token included
    dim: int
    heads: int
    mlp_dim: int
    token_dim: int
    num_classes: int
    use_layernorm: bool = True

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ShapeError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.patches < 2:
            raise ShapeError(f"need at least 2 patches, got {self.patches}")
        if self.layers < 1:
            raise ShapeError(f"need at least 1 layer, got {self.layers}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def to_dict(self) -> dict:
        return {
            "layers": self.layers,
            "patches": self.patches,
            "dim": self.dim,
            "heads": self.heads,
            "mlp_dim": self.mlp_dim,
            "token_dim": self.token_dim,
            "num_classes": self.num_classes,
            "use_layernorm": self.use_layernorm,
        }


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def layer_tensor_names(config: ModelConfig, layer: int) -> list:
    names = []
    for h in range(config.heads):
        names += [f"layer.{layer}.Wq.{h}", f"layer.{layer}.Wk.{h}", f"layer.{layer}.Wv.{h}"]
    names += [f"layer.{layer}.Wo", f"layer.{layer}.Wa", f"layer.{layer}.Wb"]
    if config.use_layernorm:
        names += [
            f"layer.{layer}.ln1.g",
            f"layer.{layer}.ln1.b",
            f"layer.{layer}.ln2.g",
            f"layer.{layer}.ln2.b",
        ]
    return names


def tensor_names(config: ModelConfig) -> list:
    names = ["embed.proj", "embed.pos", "embed.cls"]
    for l in range(config.layers):
        names += layer_tensor_names(config, l)
    names.append("head.W")
    return names


def tensor_shape(config: ModelConfig, name: str) -> tuple:
    d = config.dim
    if name == "embed.proj":
        return (config.token_dim, d)
    if name == "embed.pos":
        return (config.patches, d)
    if name == "embed.cls":
        return (1, d)
    if name == "head.W":
        return (d, config.num_classes)
    kind = name.split(".")[2]
    if kind in ("Wq", "Wk", "Wv"):
        return (d, config.head_dim)
    if kind == "Wo":
        return (d, d)
    if kind == "Wa":
        return (d, config.mlp_dim)
    if kind == "Wb":
        return (config.mlp_dim, d)
    if kind in ("ln1", "ln2"):
        return (d,)
    raise KeyError(name)


def init_params(config: ModelConfig, rng: Rng) -> dict:
    """Gaussian init scaled by 1/sqrt(fan_in); layer-norm gains start at 1."""
    params = {}
    for name in tensor_names(config):
        shape = tensor_shape(config, name)
        if name.endswith((".ln1.g", ".ln2.g")):
            params[name] = np.ones(shape)
        elif name.endswith((".ln1.b", ".ln2.b")):
            params[name] = np.zeros(shape)
        elif name in ("embed.pos", "embed.cls"):
            params[name] = rng.normal(0.02, shape)
        else:
            params[name] = rng.normal(1.0 / np.sqrt(shape[0]), shape)
    return params


def check_params(params: dict, config: ModelConfig) -> None:
    for name in tensor_names(config):
        if name not in params:
            raise ShapeError(f"missing tensor {name}")
        got = tuple(np.shape(val(params[name])))
        want = tensor_shape(config, name)
        if got != want:
            raise ShapeError(f"tensor {name}: shape {got}, expected {want}")
        if not np.all(np.isfinite(val(params[name]))):
            raise NumericOverflowError(f"tensor {name} contains non-finite values")


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------


def full_mask(n: int) -> np.ndarray:
    return np.ones(n)


def class_only_mask(n: int) -> np.ndarray:
    m = np.zeros(n)
    m[0] = 1.0
    return m


def mask_from_indices(n: int, indices) -> np.ndarray:
    m = np.zeros(n)
    m[np.asarray(list(indices), dtype=int)] = 1.0
    return m


def kept_count(mask) -> int:
    return int(round(float(np.asarray(mask).sum())))


@dataclass
class MaskSchedule:
    """One output mask per block; deeper masks must be subsets of shallower ones."""

    masks: list = field(default_factory=list)

    def __post_init__(self):
        self.masks = [np.asarray(m, dtype=np.float64) for m in self.masks]
        self.validate()

    def validate(self) -> None:
        for j, m in enumerate(self.masks):
            if not np.all((m == 0.0) | (m == 1.0)):
                raise MaskNestingError(f"mask {j} is not binary")
            if m.sum() < 1:
                raise MaskNestingError(f"mask {j} keeps no patches")
        for j in range(1, len(self.masks)):
            if np.any(self.masks[j] > self.masks[j - 1]):
                raise MaskNestingError(f"mask {j} keeps a patch dropped by mask {j - 1}")

    @property
    def layers(self) -> int:
        return len(self.masks)

    @property
    def patches(self) -> int:
        return len(self.masks[0])

    def kept_counts(self) -> list:
        return [kept_count(m) for m in self.masks]

    def copy(self) -> "MaskSchedule":
        return MaskSchedule([m.copy() for m in self.masks])

    @staticmethod
    def all_ones(layers: int, patches: int) -> "MaskSchedule":
        return MaskSchedule([full_mask(patches) for _ in range(layers)])

    @staticmethod
    def class_only(layers: int, patches: int) -> "MaskSchedule":
        return MaskSchedule([class_only_mask(patches) for _ in range(layers)])


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


@dataclass
class ForwardTrace:
    """Everything captured during one forward pass over a batch.

    features[j]   : (S, N, d) input of block j; features[L] is the final output
    intermediates : (S, N, d) per block, the post-attention residual state
    attention     : (S, H, N, N) per block, rows zeroed where the output mask is 0
    logits        : (S, num_classes)
    """

    features: list
    intermediates: list
    attention: list
    logits: np.ndarray

    @property
    def samples(self) -> int:
        return self.features[0].shape[0]

    @property
    def layers(self) -> int:
        return len(self.attention)


def _rowmask(x, mask):
    """Zero the token rows where mask is 0. mask: (N,) or per-sample (S, N)."""
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim == 1:
        m = m[:, None]
    else:  # per-sample masks; attention tensors carry an extra head axis
        m = m[:, None, :, None] if val(x).ndim == 4 else m[:, :, None]
    return ad.mul(x, m)


def _check_masks(mask_in, mask_out, layer: int) -> None:
    if np.any(np.asarray(mask_out) > np.asarray(mask_in)):
        raise MaskNestingError(
            f"block {layer}: output mask keeps a patch absent from the input mask"
        )


def embed_tokens(raw_tokens, params, config: ModelConfig):
    """(S, N-1, token_dim) raw tokens -> (S, N, d): class row, projection, positions."""
    raw = val(raw_tokens)
    squeeze = raw.ndim == 2
    if squeeze:
        raw = raw[None]
    if raw.shape[1:] != (config.patches - 1, config.token_dim):
        raise ShapeError(
            f"raw tokens shape {raw.shape[1:]} does not match "
            f"(patches-1, token_dim) = ({config.patches - 1}, {config.token_dim})"
        )
    projected = ad.matmul(raw, params["embed.proj"])  # (S, N-1, d)
    cls = ad.add(np.zeros((raw.shape[0], 1, config.dim)), params["embed.cls"])
    tokens = ad.concat_rows([cls, projected])
    out = ad.add(tokens, params["embed.pos"])
    return _desqueeze(out, squeeze)


def _desqueeze(x, squeeze: bool):
    if not squeeze:
        return x
    return ad.take_batch0(x) if ad.is_var(x) else x[0]


def pruned_block_forward(z_prev, mask_in, mask_out, params, config: ModelConfig, layer: int):
    """One masked transformer block.

    Keys/values come from input-mask-active rows; queries, attention rows, the
    shortcut into the attention output, and the MLP exist only on output-mask
    rows, with the MLP result zero-padded before the second shortcut. Returns
    (z_next, z_inter, attn) where attn is (S, H, N, N) with inactive rows zero.
    """
    z_in = z_prev
    squeeze = val(z_prev).ndim == 2
    if squeeze:
        z_in = ad.expand_batch(z_prev) if ad.is_var(z_prev) else val(z_prev)[None]
    _check_masks(mask_in, mask_out, layer)

    s, n, d = val(z_in).shape
    if config.use_layernorm:
        src = ad.mul(ad.normalize_rows(z_in, LN_EPS), params[f"layer.{layer}.ln1.g"])
        src = ad.add(src, params[f"layer.{layer}.ln1.b"])
    else:
        src = z_in
    src = _rowmask(src, mask_in)

    # all heads at once: (S, 1, N, d) @ (H, d, dh) -> (S, H, N, dh)
    w_q = ad.stack0([params[f"layer.{layer}.Wq.{h}"] for h in range(config.heads)])
    w_k = ad.stack0([params[f"layer.{layer}.Wk.{h}"] for h in range(config.heads)])
    w_v = ad.stack0([params[f"layer.{layer}.Wv.{h}"] for h in range(config.heads)])
    src4 = ad.reshape(src, (s, 1, n, d))
    q = ad.matmul(src4, w_q)
    k = ad.matmul(src4, w_k)
    v = ad.matmul(src4, w_v)
    logits = ad.scale(ad.matmul(q, ad.swap_last(k)), 1.0 / np.sqrt(d))
    attn = _rowmask(ad.softmax_rows(logits), mask_out)  # (S, H, N, N)
    heads = ad.matmul(attn, v)  # (S, H, N, dh)
    merged = ad.reshape(ad.moveaxis(heads, 1, 2), (s, n, d))
    msa = ad.matmul(merged, params[f"layer.{layer}.Wo"])
    z_inter = ad.add(msa, _rowmask(z_in, mask_out))

    if config.use_layernorm:
        mlp_src = ad.mul(ad.normalize_rows(z_inter, LN_EPS), params[f"layer.{layer}.ln2.g"])
        mlp_src = ad.add(mlp_src, params[f"layer.{layer}.ln2.b"])
        mlp_src = _rowmask(mlp_src, mask_out)
    else:
        mlp_src = z_inter
    hidden = ad.gelu(ad.matmul(mlp_src, params[f"layer.{layer}.Wa"]))
    mlp_out = _rowmask(ad.matmul(hidden, params[f"layer.{layer}.Wb"]), mask_out)
    z_next = ad.add(mlp_out, z_inter)

    if not np.all(np.isfinite(val(z_next))):
        raise NumericOverflowError(f"block {layer} produced non-finite values")
    attn_stack = val(attn)  # (S, H, N, N)
    if squeeze:
        return _desqueeze(z_next, True), _desqueeze(z_inter, True), attn_stack[0]
    return z_next, z_inter, attn_stack


def block_forward(z_prev, params, config: ModelConfig, layer: int):
    """Unpruned block: the masked path with all-ones masks (same arithmetic)."""
    ones = full_mask(config.patches)
    return pruned_block_forward(z_prev, ones, ones, params, config, layer)


def run_model(raw_tokens, params, config: ModelConfig, schedule=None):
    """Forward pass; entries are Vars when params are Vars.

    `schedule` may be a MaskSchedule or a list of per-sample (S, N) mask
    arrays. Returns (logits, features, intermediates, attention).
    """
    masks = None
    if schedule is not None:
        masks = schedule.masks if isinstance(schedule, MaskSchedule) else list(schedule)
        if len(masks) != config.layers:
            raise ShapeError(
                f"schedule has {len(masks)} masks for {config.layers} blocks"
            )
    z = embed_tokens(raw_tokens, params, config)
    features = [z]
    inters = []
    attention = []
    mask_prev = full_mask(config.patches)
    for j in range(config.layers):
        mask_out = masks[j] if masks is not None else full_mask(config.patches)
        z, z_inter, attn = pruned_block_forward(z, mask_prev, mask_out, params, config, j)
        features.append(z)
        inters.append(z_inter)
        attention.append(attn)
        mask_prev = mask_out
    logits = ad.matmul(ad.take_token(z, 0), params["head.W"])
    return logits, features, inters, attention


def model_forward(raw_tokens, params, config: ModelConfig, schedule=None) -> ForwardTrace:
    """Forward pass over a batch, returning plain-array trace buffers."""
    raw = val(raw_tokens)
    if raw.ndim == 2:
        raw = raw[None]
    logits, features, inters, attention = run_model(raw, params, config, schedule)
    return ForwardTrace(
        features=[np.array(val(f)) for f in features],
        intermediates=[np.array(val(f)) for f in inters],
        attention=list(attention),
        logits=np.array(val(logits)),
    )


def partial_schedule(schedule: MaskSchedule, layer: int) -> MaskSchedule:
    """Blocks 0..layer unmasked, deeper blocks masked as in `schedule`."""
    masks = [full_mask(schedule.patches) for _ in range(layer + 1)]
    masks += [m.copy() for m in schedule.masks[layer + 1 :]]
    return MaskSchedule(masks)


def single_layer_pruned_forward(
    raw_tokens, params, config: ModelConfig, layer: int, mask
) -> ForwardTrace:
    """Prune one block only: dense blocks elsewhere, `mask` at `layer`.

    Downstream blocks run unmasked, so rows dropped at `layer` re-enter later
    attention with zero keys/values and may be recomputed. This is the
    single-layer ablation forward; it never violates mask nesting because
    every other block uses all-ones masks.
    """
    raw = val(raw_tokens)
    if raw.ndim == 2:
        raw = raw[None]
    ones = full_mask(config.patches)
    z = embed_tokens(raw, params, config)
    features = [val(z)]
    inters = []
    attention = []
    for j in range(config.layers):
        mask_out = np.asarray(mask, dtype=np.float64) if j == layer else ones
        z, z_inter, attn = pruned_block_forward(z, ones, mask_out, params, config, j)
        features.append(val(z))
        inters.append(val(z_inter))
        attention.append(attn)
    logits = val(ad.matmul(ad.take_token(z, 0), params["head.W"]))
    return ForwardTrace(features, inters, attention, logits)


# ---------------------------------------------------------------------------
# compact (gather) execution path
# ---------------------------------------------------------------------------


class MacCounter:
    """Scalar multiply-accumulate tally for the gather path, split MSA/MLP."""

    def __init__(self):
        self.msa = 0
        self.mlp = 0

    def total(self) -> int:
        return self.msa + self.mlp


def _counted_mm(a: np.ndarray, b: np.ndarray, counter, slot: str) -> np.ndarray:
    if counter is not None:
        macs = a.shape[0] * a.shape[1] * b.shape[1]
        setattr(counter, slot, getattr(counter, slot) + macs)
    return a @ b


def pruned_block_forward_gather(
    z_prev: np.ndarray,
    mask_in,
    mask_out,
    params,
    config: ModelConfig,
    layer: int,
    counter: MacCounter | None = None,
):
    """Single-sample compact block: physically gathers active rows.

    Matches the dense path on active rows. Keys/values are built for all
    input-mask rows; dropped columns enter each softmax denominator as
    exp(-rowmax) terms (their logit is exactly 0) without multiplications.
    """
    z_prev = val(z_prev)
    if z_prev.ndim != 2:
        raise ShapeError(f"gather path expects one sample, got shape {z_prev.shape}")
    _check_masks(mask_in, mask_out, layer)
    n, d = z_prev.shape
    idx_in = np.flatnonzero(np.asarray(mask_in) > 0)
    idx_out = np.flatnonzero(np.asarray(mask_out) > 0)
    n_phantom = n - idx_in.size
    out_within_in = np.searchsorted(idx_in, idx_out)

    z_in = z_prev[idx_in]
    if config.use_layernorm:
        src_in = layer_norm_rows(
            z_in, params[f"layer.{layer}.ln1.g"], params[f"layer.{layer}.ln1.b"], LN_EPS
        )
    else:
        src_in = z_in
    src_out = src_in[out_within_in]

    head_outs = []
    attn = np.zeros((config.heads, n, n))
    scale = 1.0 / np.sqrt(d)
    for h in range(config.heads):
        k = _counted_mm(src_in, params[f"layer.{layer}.Wk.{h}"], counter, "msa")
        v = _counted_mm(src_in, params[f"layer.{layer}.Wv.{h}"], counter, "msa")
        q = _counted_mm(src_out, params[f"layer.{layer}.Wq.{h}"], counter, "msa")
        logits = _counted_mm(q, k.T, counter, "msa") * scale
        rowmax = logits.max(axis=1)
        if n_phantom > 0:
            rowmax = np.maximum(rowmax, 0.0)
        e = np.exp(logits - rowmax[:, None])
        denom = e.sum(axis=1) + n_phantom * np.exp(-rowmax)
        p = e / denom[:, None]
        attn[h][np.ix_(idx_out, idx_in)] = p
        head_outs.append(_counted_mm(p, v, counter, "msa"))
    msa = _counted_mm(np.concatenate(head_outs, axis=1), params[f"layer.{layer}.Wo"], counter, "msa")
    z_inter_active = msa + z_prev[idx_out]

    if config.use_layernorm:
        mlp_src = layer_norm_rows(
            z_inter_active,
            params[f"layer.{layer}.ln2.g"],
            params[f"layer.{layer}.ln2.b"],
            LN_EPS,
        )
    else:
        mlp_src = z_inter_active
    hidden = _counted_mm(mlp_src, params[f"layer.{layer}.Wa"], counter, "mlp")
    mlp_active = _counted_mm(np_gelu(hidden), params[f"layer.{layer}.Wb"], counter, "mlp")

    z_inter = np.zeros_like(z_prev)
    z_inter[idx_out] = z_inter_active
    z_next = np.zeros_like(z_prev)
    z_next[idx_out] = mlp_active + z_inter_active
    return z_next, z_inter, attn
