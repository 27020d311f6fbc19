"""JSON artifact files with embedded base64 tensors.

Every artifact is a JSON object carrying format_version, seed, and
config_echo metadata. Tensors are little-endian float32, row-major, base64.
Writes go through a temp file plus rename, and dumps are canonical
(sorted keys, fixed separators), so a rerun with the same seed produces
byte-identical files.
"""

from __future__ import annotations

import base64
import json
import os
import tempfile

import numpy as np

from .errors import FormatError, MaskNestingError
from .model import MaskSchedule, ModelConfig, tensor_names, tensor_shape
from .numerics import RNG_ALGORITHM
from .training import Batch, ToyDatasetSpec

FORMAT_VERSION = 1


def _encode_tensor(arr: np.ndarray) -> dict:
    arr = np.asarray(arr)
    return {
        "shape": list(arr.shape),
        "dtype": "f32",
        "data": base64.b64encode(arr.astype("<f4").tobytes()).decode("ascii"),
    }


def _decode_tensor(obj: dict, name: str) -> np.ndarray:
    try:
        shape = tuple(obj["shape"])
        raw = base64.b64decode(obj["data"], validate=True)
        if obj.get("dtype", "f32") != "f32":
            raise FormatError(f"tensor {name}: unsupported dtype {obj['dtype']!r}")
    except (KeyError, TypeError, ValueError) as err:
        raise FormatError(f"tensor {name}: corrupt tensor block ({err})") from err
    expected = int(np.prod(shape)) * 4 if shape else 4
    if len(raw) != expected:
        raise FormatError(
            f"tensor {name}: {len(raw)} bytes for shape {shape} (expected {expected})"
        )
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)


def save_json_atomic(path: str, obj: dict) -> None:
    """Canonical dump via temp file + rename; never leaves partial output."""
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_json(path: str) -> dict:
    if not os.path.exists(path):
        raise FormatError(f"file not found: {path}")
    try:
        with open(path) as handle:
            obj = json.load(handle)
    except json.JSONDecodeError as err:
        raise FormatError(f"{path}: not valid JSON ({err})") from err
    if not isinstance(obj, dict):
        raise FormatError(f"{path}: expected a JSON object")
    version = obj.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatError(
            f"{path}: format_version {version!r} not supported (expected {FORMAT_VERSION})"
        )
    return obj


def _meta(kind: str, seed, config_echo) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "seed": seed,
        "config_echo": config_echo or {},
        "rng_algorithm": RNG_ALGORITHM,
    }


def _expect_kind(obj: dict, kind: str, path: str) -> None:
    if obj.get("kind") != kind:
        raise FormatError(f"{path}: expected a {kind} file, found {obj.get('kind')!r}")


# -- models -----------------------------------------------------------------


def save_model(path: str, params: dict, config: ModelConfig, seed=None, config_echo=None) -> None:
    obj = _meta("model", seed, config_echo)
    obj["config"] = config.to_dict()
    obj["tensors"] = {name: _encode_tensor(params[name]) for name in tensor_names(config)}
    save_json_atomic(path, obj)


def load_model(path: str) -> tuple:
    obj = load_json(path)
    _expect_kind(obj, "model", path)
    try:
        config = ModelConfig(**obj["config"])
    except (KeyError, TypeError) as err:
        raise FormatError(f"{path}: bad model config ({err})") from err
    params = {}
    for name in tensor_names(config):
        if name not in obj.get("tensors", {}):
            raise FormatError(f"{path}: missing tensor {name}")
        arr = _decode_tensor(obj["tensors"][name], name)
        want = tensor_shape(config, name)
        if arr.shape != want:
            raise FormatError(f"{path}: tensor {name} shape {arr.shape}, expected {want}")
        params[name] = arr
    return params, config, obj


# -- mask schedules ----------------------------------------------------------


def save_masks(path: str, schedule: MaskSchedule, seed=None, config_echo=None) -> None:
    obj = _meta("masks", seed, config_echo)
    obj["masks"] = ["".join(str(int(b)) for b in m) for m in schedule.masks]
    save_json_atomic(path, obj)


def load_masks(path: str, expect_patches: int | None = None) -> MaskSchedule:
    obj = load_json(path)
    _expect_kind(obj, "masks", path)
    strings = obj.get("masks")
    if not isinstance(strings, list) or not strings:
        raise FormatError(f"{path}: missing mask bitstrings")
    masks = []
    for j, bits in enumerate(strings):
        if not isinstance(bits, str) or set(bits) - {"0", "1"}:
            raise FormatError(f"{path}: mask {j} is not a bitstring")
        masks.append(np.array([float(c) for c in bits]))
    if expect_patches is not None and len(masks[0]) != expect_patches:
        raise FormatError(
            f"{path}: masks cover {len(masks[0])} patches, expected {expect_patches}"
        )
    try:
        return MaskSchedule(masks)
    except MaskNestingError as err:
        raise FormatError(f"{path}: {err}") from err


# -- predictors ---------------------------------------------------------------


def save_predictors(path: str, predictors, seed=None, config_echo=None) -> None:
    obj = _meta("predictors", seed, config_echo)
    obj["group_size"] = predictors.group_size
    obj["tensors"] = {k: _encode_tensor(v) for k, v in sorted(predictors.tensors.items())}
    save_json_atomic(path, obj)


def load_predictors(path: str):
    from .dynamic import PredictorParams

    obj = load_json(path)
    _expect_kind(obj, "predictors", path)
    tensors = {k: _decode_tensor(v, k) for k, v in obj.get("tensors", {}).items()}
    if not tensors:
        raise FormatError(f"{path}: no predictor tensors")
    return PredictorParams(int(obj.get("group_size", 1)), tensors)


# -- datasets -----------------------------------------------------------------


def save_dataset(path: str, batch: Batch, spec: ToyDatasetSpec, seed=None, config_echo=None) -> None:
    obj = _meta("dataset", seed, config_echo)
    obj["spec"] = spec.to_dict()
    obj["labels"] = [int(x) for x in batch.labels]
    obj["inputs"] = _encode_tensor(batch.inputs)
    save_json_atomic(path, obj)


def load_dataset(path: str) -> tuple:
    obj = load_json(path)
    _expect_kind(obj, "dataset", path)
    try:
        spec = ToyDatasetSpec(**obj["spec"])
    except (KeyError, TypeError) as err:
        raise FormatError(f"{path}: bad dataset spec ({err})") from err
    inputs = _decode_tensor(obj["inputs"], "inputs")
    labels = np.asarray(obj.get("labels", []), dtype=np.int64)
    if inputs.ndim != 3 or inputs.shape[0] != labels.shape[0]:
        raise FormatError(f"{path}: inputs {inputs.shape} do not match {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= spec.num_classes):
        raise FormatError(f"{path}: label out of range for {spec.num_classes} classes")
    return Batch(inputs, labels), spec, obj


def load_csv_image_grid(path: str, image_height: int, image_width: int, patch_size: int) -> Batch:
    """CSV rows of `label, pixel...` tokenized into non-overlapping patches.

    Pixels are row-major over an image_height x image_width grayscale grid;
    each patch_size x patch_size tile becomes one token of width patch_size^2.
    """
    if image_height % patch_size or image_width % patch_size:
        raise FormatError(
            f"patch size {patch_size} does not tile {image_height}x{image_width}"
        )
    if not os.path.exists(path):
        raise FormatError(f"file not found: {path}")
    try:
        table = np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError as err:
        raise FormatError(f"{path}: bad CSV ({err})") from err
    if table.shape[1] != 1 + image_height * image_width:
        raise FormatError(
            f"{path}: rows have {table.shape[1]} fields, expected "
            f"{1 + image_height * image_width} (label + pixels)"
        )
    labels = table[:, 0].astype(np.int64)
    images = table[:, 1:].reshape(-1, image_height, image_width)
    rows, cols = image_height // patch_size, image_width // patch_size
    tokens = (
        images.reshape(-1, rows, patch_size, cols, patch_size)
        .transpose(0, 1, 3, 2, 4)
        .reshape(-1, rows * cols, patch_size * patch_size)
    )
    return Batch(tokens, labels)
