"""Command-line pipelines tying the library together.

Exit codes: 0 success, 1 usage error (bad flags, missing or malformed files),
2 numeric/runtime failure. Flags may come from a JSON config file passed via
--config; an explicit command-line flag always wins. Seeds are required
wherever randomness is involved and are echoed into every output artifact.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import tempfile

import numpy as np

from .costmodel import instrumented_mac_count, schedule_cost
from .dynamic import evaluate_dynamic, train_predictors
from .errors import FormatError, MaskNestingError, NumericOverflowError, ShapeError
from .model import MaskSchedule, ModelConfig, model_forward
from .pruner import PrunerConfig, prune_topdown
from .scoring import layer_similarity_profile, significance_scores
from .serialization import (
    FORMAT_VERSION,
    load_dataset,
    load_masks,
    load_model,
    load_predictors,
    save_dataset,
    save_json_atomic,
    save_masks,
    save_model,
    save_predictors,
)
from .training import (
    Batch,
    OptimizerConfig,
    ToyDatasetSpec,
    evaluate,
    gen_toy_dataset,
    train_model,
)

log = logging.getLogger("patchslim")

COMMANDS = (
    "gen-data",
    "train",
    "eval",
    "similarity",
    "score",
    "prune",
    "flops",
    "train-predictors",
    "eval-dynamic",
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(parser):
    parser.add_argument("--config", help="JSON file of default flag values")
    parser.add_argument("--log-level", default=None, help="debug|info|warning|error")
    parser.add_argument("--threads", type=int, default=None, help="BLAS thread cap")


def build_parser() -> _Parser:
    parser = _Parser(prog="patchslim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a toy dataset file")
    _add_common(p)
    p.add_argument("--spec", default=None, help="'default' or a JSON spec file")
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)

    p = sub.add_parser("train", help="train a model on a dataset file")
    _add_common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--momentum", type=float, default=None)
    p.add_argument("--optimizer", default=None, choices=("sgd", "adam"))
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--layers", type=int, default=None)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--mlp-dim", type=int, default=None)
    p.add_argument("--no-layernorm", action="store_true", default=None)
    p.add_argument("--out-model", default=None)

    p = sub.add_parser("eval", help="accuracy of a model (optionally masked)")
    _add_common(p)
    p.add_argument("--model", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--masks", default=None)
    p.add_argument("--out", default=None)

    p = sub.add_parser("similarity", help="per-layer mean patch cosine CSV")
    _add_common(p)
    p.add_argument("--model", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--out-csv", default=None)

    p = sub.add_parser("score", help="patch significance CSV")
    _add_common(p)
    p.add_argument("--model", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--masks", default=None)
    p.add_argument("--layer", type=int, default=None, help="one block (default: all)")
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-csv", default=None)

    p = sub.add_parser("prune", help="top-down mask search under an error budget")
    _add_common(p)
    p.add_argument("--model", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--granularity", type=int, default=None)
    p.add_argument("--scorer", default=None, choices=("significance", "random", "attn_norm"))
    p.add_argument("--finetune-epochs", type=int, default=None)
    p.add_argument("--calibration", type=int, default=None)
    p.add_argument("--raw-error", action="store_true", default=None)
    p.add_argument("--finetune-lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-masks", default=None)
    p.add_argument("--out-model", default=None)
    p.add_argument("--report", default=None)

    p = sub.add_parser("flops", help="analytic MAC report for a schedule")
    _add_common(p)
    p.add_argument("--model", default=None)
    p.add_argument("--masks", default=None)
    p.add_argument("--out-json", default=None)
    p.add_argument("--out-csv", default=None)

    p = sub.add_parser("train-predictors", help="fit per-block significance predictors")
    _add_common(p)
    p.add_argument("--model", default=None)
    p.add_argument("--masks", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-predictors", default=None)

    p = sub.add_parser("eval-dynamic", help="accuracy with per-input patch selection")
    _add_common(p)
    p.add_argument("--model", default=None)
    p.add_argument("--predictors", default=None)
    p.add_argument("--masks", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--out", default=None)
    return parser


DEFAULTS = {
    "gen-data": {"spec": "default"},
    "train": {
        "epochs": 30,
        "lr": 0.05,
        "momentum": 0.9,
        "optimizer": "sgd",
        "batch_size": 64,
        "layers": 4,
        "dim": 32,
        "heads": 4,
        "mlp_dim": 64,
        "no_layernorm": False,
    },
    "eval": {},
    "similarity": {"samples": 256},
    "score": {"samples": 256},
    "prune": {
        "epsilon": 0.01,
        "granularity": 10,
        "scorer": "significance",
        "finetune_epochs": 3,
        "calibration": 256,
        "raw_error": False,
        "finetune_lr": 0.01,
    },
    "flops": {},
    "train-predictors": {"epochs": 40, "lr": 0.05},
    "eval-dynamic": {},
}

REQUIRED = {
    "gen-data": ("seed", "out"),
    "train": ("data", "seed", "out_model"),
    "eval": ("model", "data"),
    "similarity": ("model", "data", "out_csv"),
    "score": ("model", "data", "seed", "out_csv"),
    "prune": ("model", "data", "seed", "out_masks", "out_model", "report"),
    "flops": ("model", "out_json"),
    "train-predictors": ("model", "masks", "data", "seed", "out_predictors"),
    "eval-dynamic": ("model", "predictors", "masks", "data"),
}


def merge_options(args: argparse.Namespace) -> dict:
    """Explicit flags beat --config file values beat built-in defaults."""
    opts = dict(DEFAULTS.get(args.command, {}))
    if args.config:
        if not os.path.exists(args.config):
            raise UsageError(f"config file not found: {args.config}")
        try:
            with open(args.config) as handle:
                file_opts = json.load(handle)
        except json.JSONDecodeError as err:
            raise UsageError(f"config file {args.config}: invalid JSON ({err})")
        if not isinstance(file_opts, dict):
            raise UsageError(f"config file {args.config}: expected a JSON object")
        for key, value in file_opts.items():
            opts[key.replace("-", "_")] = value
    for key, value in vars(args).items():
        if key in ("command", "config") or value is None:
            continue
        opts[key] = value
    for key in REQUIRED.get(args.command, ()):
        if opts.get(key) is None:
            raise UsageError(f"--{key.replace('_', '-')} is required for {args.command}")
    return opts


def write_csv_atomic(path: str, header: list, rows: list) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(header)
            writer.writerows(rows)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _echo(opts: dict) -> dict:
    return {k: v for k, v in sorted(opts.items())}


def _load_spec(opts) -> ToyDatasetSpec:
    name = opts.get("spec") or "default"
    if name == "default":
        spec = ToyDatasetSpec()
    else:
        if not os.path.exists(name):
            raise UsageError(f"spec file not found: {name}")
        with open(name) as handle:
            try:
                fields = json.load(handle)
            except json.JSONDecodeError as err:
                raise UsageError(f"spec file {name}: invalid JSON ({err})")
        try:
            spec = ToyDatasetSpec(**fields)
        except TypeError as err:
            raise UsageError(f"spec file {name}: {err}")
    if opts.get("samples"):
        spec.sample_count = int(opts["samples"])
    return spec


# ---------------------------------------------------------------------------
# command handlers
# ---------------------------------------------------------------------------


def cmd_gen_data(opts):
    spec = _load_spec(opts)
    batch = gen_toy_dataset(spec, opts["seed"])
    save_dataset(opts["out"], batch, spec, seed=opts["seed"], config_echo=_echo(opts))
    log.info("wrote %s (%d samples)", opts["out"], batch.size)


def _model_config_for(spec: ToyDatasetSpec, opts) -> ModelConfig:
    return ModelConfig(
        layers=opts["layers"],
        patches=spec.tokens_per_sample + 1,
        dim=opts["dim"],
        heads=opts["heads"],
        mlp_dim=opts["mlp_dim"],
        token_dim=spec.token_dim,
        num_classes=spec.num_classes,
        use_layernorm=not opts["no_layernorm"],
    )


def cmd_train(opts):
    batch, spec, _ = load_dataset(opts["data"])
    config = _model_config_for(spec, opts)
    opt_cfg = OptimizerConfig(kind=opts["optimizer"], lr=opts["lr"], momentum=opts["momentum"])
    params, history = train_model(
        config, batch, opt_cfg, epochs=opts["epochs"], seed=opts["seed"],
        batch_size=opts["batch_size"],
    )
    echo = _echo(opts)
    echo["final_train_accuracy"] = history[-1]["accuracy"] if history else None
    save_model(opts["out_model"], params, config, seed=opts["seed"], config_echo=echo)
    log.info("wrote %s (final train accuracy %s)", opts["out_model"], echo["final_train_accuracy"])


def _load_masks_for(config: ModelConfig, path: str) -> MaskSchedule:
    schedule = load_masks(path, expect_patches=config.patches)
    if schedule.layers != config.layers:
        raise FormatError(
            f"{path}: {schedule.layers} masks for a {config.layers}-block model"
        )
    return schedule


def cmd_eval(opts):
    params, config, _ = load_model(opts["model"])
    batch, _, _ = load_dataset(opts["data"])
    schedule = _load_masks_for(config, opts["masks"]) if opts.get("masks") else None
    stats = evaluate(params, config, batch, schedule)
    result = {
        "format_version": FORMAT_VERSION,
        "kind": "eval",
        "seed": opts.get("seed"),
        "config_echo": _echo(opts),
        "accuracy": stats["accuracy"],
        "loss": stats["loss"],
    }
    if opts.get("out"):
        save_json_atomic(opts["out"], result)
    print(json.dumps({"accuracy": stats["accuracy"], "loss": stats["loss"]}))


def cmd_similarity(opts):
    params, config, _ = load_model(opts["model"])
    batch, _, _ = load_dataset(opts["data"])
    take = min(opts["samples"], batch.size)
    trace = model_forward(batch.inputs[:take], params, config)
    profile = layer_similarity_profile(trace)
    rows = [[level, repr(float(v))] for level, v in enumerate(profile)]
    write_csv_atomic(opts["out_csv"], ["layer", "mean_cosine"], rows)
    log.info("wrote %s", opts["out_csv"])


def cmd_score(opts):
    from .numerics import Rng

    params, config, _ = load_model(opts["model"])
    batch, _, _ = load_dataset(opts["data"])
    if opts.get("masks"):
        schedule = _load_masks_for(config, opts["masks"])
    else:
        schedule = MaskSchedule.all_ones(config.layers, config.patches)
        schedule.masks[-1][1:] = 0.0
    take = min(opts["samples"], batch.size)
    idx = Rng(opts["seed"]).choice(batch.size, take, replace=False)
    calib = batch.take(idx)
    layers = [opts["layer"]] if opts.get("layer") is not None else range(config.layers - 1)
    rows = []
    for layer in layers:
        if not 0 <= layer < config.layers - 1:
            raise UsageError(
                f"--layer must be in 0..{config.layers - 2}, got {layer}"
            )
        from .model import partial_schedule

        trace = model_forward(calib.inputs, params, config, partial_schedule(schedule, layer))
        vec = significance_scores(trace, schedule.masks[layer + 1 :], layer)
        ranks = np.empty(config.patches, dtype=int)
        ranks[np.argsort(-vec.values, kind="stable")] = np.arange(config.patches)
        for i in range(config.patches):
            rows.append([layer, i, repr(float(vec.values[i])), int(ranks[i])])
    write_csv_atomic(opts["out_csv"], ["layer", "patch_index", "score", "rank"], rows)
    log.info("wrote %s", opts["out_csv"])


def cmd_prune(opts):
    params, config, _ = load_model(opts["model"])
    batch, _, _ = load_dataset(opts["data"])
    pruner_config = PrunerConfig(
        epsilon=opts["epsilon"],
        granularity=opts["granularity"],
        finetune_epochs=opts["finetune_epochs"],
        calibration_size=opts["calibration"],
        scorer=opts["scorer"],
        normalize_error=not opts["raw_error"],
        finetune_lr=opts["finetune_lr"],
    )
    result = prune_topdown(params, config, batch, pruner_config, seed=opts["seed"])
    echo = _echo(opts)
    save_masks(opts["out_masks"], result.schedule, seed=opts["seed"], config_echo=echo)
    save_model(opts["out_model"], result.params, config, seed=opts["seed"], config_echo=echo)
    report = {
        "format_version": FORMAT_VERSION,
        "kind": "prune-report",
        "seed": opts["seed"],
        "config_echo": echo,
    }
    report.update(result.report.to_dict())
    save_json_atomic(opts["report"], report)
    log.info(
        "wrote %s %s %s (kept %s, %.1f%% MAC reduction, %.1fs)",
        opts["out_masks"], opts["out_model"], opts["report"],
        result.report.kept_counts, result.report.reduction_percent,
        result.report.wall_time_seconds,
    )


def cmd_flops(opts):
    params, config, _ = load_model(opts["model"])
    schedule = _load_masks_for(config, opts["masks"]) if opts.get("masks") else None
    report = schedule_cost(config, schedule)
    obj = {
        "format_version": FORMAT_VERSION,
        "kind": "cost-report",
        "seed": opts.get("seed"),
        "config_echo": _echo(opts),
    }
    obj.update(report.to_dict())
    save_json_atomic(opts["out_json"], obj)
    if opts.get("out_csv"):
        rows = [
            [c.layer, c.kept_in, c.kept_out, c.msa_macs, c.mlp_macs, c.total]
            for c in report.per_layer
        ]
        write_csv_atomic(
            opts["out_csv"],
            ["layer", "kept_in", "kept_out", "msa_macs", "mlp_macs", "total_macs"],
            rows,
        )
    log.info("wrote %s (%.2f%% reduction)", opts["out_json"], report.reduction_percent)


def cmd_train_predictors(opts):
    params, config, _ = load_model(opts["model"])
    schedule = _load_masks_for(config, opts["masks"])
    batch, _, _ = load_dataset(opts["data"])
    predictors, losses = train_predictors(
        params, config, schedule, batch,
        epochs=opts["epochs"], seed=opts["seed"], lr=opts["lr"],
    )
    echo = _echo(opts)
    echo["final_losses"] = losses
    save_predictors(opts["out_predictors"], predictors, seed=opts["seed"], config_echo=echo)
    log.info("wrote %s (losses %s)", opts["out_predictors"], losses)


def cmd_eval_dynamic(opts):
    params, config, _ = load_model(opts["model"])
    predictors = load_predictors(opts["predictors"])
    schedule = _load_masks_for(config, opts["masks"])
    batch, _, _ = load_dataset(opts["data"])
    budgets = schedule.kept_counts()
    stats = evaluate_dynamic(params, config, predictors, budgets, batch)
    result = {
        "format_version": FORMAT_VERSION,
        "kind": "eval-dynamic",
        "seed": opts.get("seed"),
        "config_echo": _echo(opts),
        "accuracy": stats["accuracy"],
        "budgets": budgets,
        "clamped": stats["clamped"],
    }
    if opts.get("out"):
        save_json_atomic(opts["out"], result)
    print(json.dumps({"accuracy": stats["accuracy"], "budgets": budgets}))


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "similarity": cmd_similarity,
    "score": cmd_score,
    "prune": cmd_prune,
    "flops": cmd_flops,
    "train-predictors": cmd_train_predictors,
    "eval-dynamic": cmd_eval_dynamic,
}


def _resolve_threads(opts) -> int:
    if opts.get("threads") is not None:
        return int(opts["threads"])
    env = os.environ.get("PATCHSLIM_THREADS")
    return int(env) if env else 1


def dispatch(argv) -> int:
    from .numerics import tune_allocator

    tune_allocator()
    try:
        args = build_parser().parse_args(argv)
        opts = merge_options(args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    logging.basicConfig(
        level=getattr(logging, (opts.get("log_level") or "info").upper(), logging.INFO),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(limits=_resolve_threads(opts))
    except ImportError:
        limiter = None
        log.debug("threadpoolctl unavailable; thread cap not applied")
    try:
        HANDLERS[args.command](opts)
        return 0
    except (UsageError, FormatError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (NumericOverflowError, ShapeError, MaskNestingError, ArithmeticError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    finally:
        if limiter is not None:
            limiter.unregister()


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
