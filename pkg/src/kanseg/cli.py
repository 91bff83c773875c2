"""
Command-line entry point: ``kanseg <subcommand> ...``.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
``--threads`` falls back to the ``KANSEG_THREADS`` environment variable.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import jsonschema
import numpy as np

from .data import (
    DEFAULT_RATIOS,
    channel_statistics,
    load_split,
    read_manifest,
    split_dataset,
    synth_channel_roles,
    synth_generate,
    write_dataset,
)
from .errors import ConfigurationError, DimensionError, LoadError, NumericalError
from .explain import (
    channel_relevance,
    grad_cam,
    otsu_threshold,
    plausibility,
    sufficiency,
    write_pgm,
    write_saliency_csv,
)
from .models import ModelConfig, build_model, flop_report, load_checkpoint, save_checkpoint
from .splinekan import KanLinearParams, activation_variance_report, export_activation_curves, probe_points
from .training import TrainConfig, evaluate, train, write_history

logger = logging.getLogger("kanseg")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
METRIC_KEYS = ("iou", "f1", "precision", "recall")


class UsageError(Exception):
    pass


_POS_INT = {"type": "integer", "minimum": 1}
MODEL_CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "in_channels": _POS_INT,
        "stage_channels": {"type": "array", "items": _POS_INT, "minItems": 1},
        "bottleneck": {"enum": ["conv", "tok_kan"]},
        "tok_kan_depth": _POS_INT,
        "token_patch": _POS_INT,
        "kan_grid": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "grid_min": {"type": "number"},
                "grid_max": {"type": "number"},
                "intervals": _POS_INT,
                "order": _POS_INT,
            },
        },
        "input_size": {"type": "array", "items": _POS_INT, "minItems": 2, "maxItems": 2},
    },
}
TRAIN_CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "learning_rate": {"type": "number", "minimum": 0},
        "batch_size": _POS_INT,
        "epochs": _POS_INT,
        "plateau_factor": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "plateau_patience": _POS_INT,
        "flip_prob": {"type": "number", "minimum": 0, "maximum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "loss_eps": {"type": "number", "exclusiveMinimum": 0},
        "weight_decay": {"type": "number", "minimum": 0},
        "float32": {"type": "boolean"},
    },
}


def _validate(d: dict, schema: dict, what: str) -> None:
    try:
        jsonschema.validate(d, schema)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise UsageError(f"{what}: field {path}: {exc.message}") from None


def _threads(args) -> int:
    if getattr(args, "threads", None):
        return max(1, args.threads)
    env = os.environ.get("KANSEG_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"KANSEG_THREADS must be an integer, got {env!r}") from None
    return 1


def _read_json(path, what: str) -> dict:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"{what}: file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what}: invalid JSON in {path}: {exc}") from None
    if not isinstance(d, dict):
        raise UsageError(f"{what}: top level of {path} must be an object")
    return d


def _write_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _split_samples(data_dir, split: str):
    samples = load_split(data_dir, split)
    if not samples:
        raise UsageError(f"split {split!r} of {data_dir} is empty")
    return samples


# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.size < 16:
        raise UsageError(f"--size must be >= 16, got {args.size}")
    if args.channels < 2:
        raise UsageError(f"--channels must be >= 2, got {args.channels}")
    if args.count < 3:
        raise UsageError(f"--count must be >= 3, got {args.count}")
    ratios = tuple(float(r) for r in args.ratios.split(","))
    samples = synth_generate(args.count, args.size, args.channels, args.seed)
    split = split_dataset(samples, ratios, seed=args.seed, max_retries=args.max_retries)
    names = [f"ch{i:02d}_{role}" for i, role in enumerate(synth_channel_roles(args.channels))]
    manifest = write_dataset(
        args.out,
        {"train": split.train, "val": split.val, "test": split.test},
        names,
        channel_statistics(split.train),
    )
    print(f"wrote {len(manifest.tiles)} tiles to {args.out} (chi-square p={split.p_value:.4g})")
    return EXIT_OK


def _model_config(args, manifest) -> ModelConfig:
    if args.config:
        d = _read_json(args.config, "model config")
        _validate(d, MODEL_CONFIG_SCHEMA, "model config")
    else:
        d = {}
    d.setdefault("in_channels", manifest.channels)
    d.setdefault("input_size", [manifest.height, manifest.width])
    d["bottleneck"] = "tok_kan" if args.model == "ukan" else "conv"
    cfg = ModelConfig.from_dict(d)
    if cfg.in_channels != manifest.channels:
        raise UsageError(f"model config in_channels={cfg.in_channels}, dataset has {manifest.channels}")
    return cfg


def _train_config(args) -> TrainConfig:
    d = TrainConfig.paper_protocol().to_dict() if args.paper_protocol else TrainConfig().to_dict()
    if args.train_config:
        overrides = _read_json(args.train_config, "train config")
        _validate(overrides, TRAIN_CONFIG_SCHEMA, "train config")
        d.update(overrides)
    if args.seed is not None:
        d["seed"] = args.seed
    if args.epochs is not None:
        d["epochs"] = args.epochs
    return TrainConfig.from_dict(d)


def cmd_train(args) -> int:
    train_cfg = _train_config(args)
    manifest = read_manifest(args.data)
    model_cfg = _model_config(args, manifest)
    train_set = _split_samples(args.data, "train")
    val_set = _split_samples(args.data, "val")
    model = build_model(model_cfg, seed=train_cfg.seed)
    os.makedirs(args.out, exist_ok=True)
    result = train(model, train_set, val_set, train_cfg, threads=_threads(args))
    write_history(result.history, os.path.join(args.out, "history.csv"))
    ckpt = os.path.join(args.out, "best.ckpt")
    save_checkpoint(result.best_model, ckpt)
    _write_json(flop_report(model, (model_cfg.in_channels, *model_cfg.input_size)),
                os.path.join(args.out, "flops.json"))
    print(ckpt)
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    samples = _split_samples(args.data, args.split)
    report = evaluate(model, samples, threads=_threads(args)).to_dict()
    text = json.dumps(report, indent=1, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return EXIT_OK


def _mean_dict(rows: list[dict]) -> dict:
    if not rows:
        return {k: None for k in METRIC_KEYS}
    return {k: float(np.mean([r[k] for r in rows])) for k in METRIC_KEYS}


def cmd_explain(args) -> int:
    model = load_checkpoint(args.checkpoint)
    samples = _split_samples(args.data, args.split)
    layer = args.layer or model.grad_cam_layer
    os.makedirs(args.out, exist_ok=True)
    per_sample, degenerate = [], []
    for s in samples:
        sal = grad_cam(model, s, layer)
        otsu = otsu_threshold(sal)
        if otsu.degenerate:
            degenerate.append(s.id)
            continue
        write_pgm(sal, os.path.join(args.out, f"{s.id}.pgm"))
        write_saliency_csv(sal, os.path.join(args.out, f"{s.id}.csv"))
        suff = sufficiency(model, s, sal)
        per_sample.append({
            "id": s.id,
            "otsu_threshold": otsu.threshold,
            "plausibility": plausibility(sal, s.mask).scores(),
            "sufficiency": suff.deltas,
        })
    summary = {
        "layer": layer,
        "split": args.split,
        "samples": per_sample,
        "degenerate": degenerate,
        "aggregate": {
            "plausibility": _mean_dict([r["plausibility"] for r in per_sample]),
            "sufficiency": _mean_dict([r["sufficiency"] for r in per_sample]),
        },
    }
    _write_json(summary, os.path.join(args.out, "xai.json"))
    print(f"explained {len(per_sample)} samples ({len(degenerate)} degenerate) -> {args.out}")
    return EXIT_OK


def cmd_relevance(args) -> int:
    model = load_checkpoint(args.checkpoint)
    manifest = read_manifest(args.data)
    samples = _split_samples(args.data, args.split)
    rows = []
    for s in samples:
        try:
            rows.append(channel_relevance(model, s, args.layer, threads=_threads(args)))
        except ValueError:
            logger.info("relevance: skipping degenerate sample %s", s.id)
    if not rows:
        raise UsageError("every sample produced a degenerate saliency map")
    means = np.mean(rows, axis=0)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["channel", "name", "mean_iou", "samples"])
        for c, value in enumerate(means):
            writer.writerow([c, manifest.channel_names[c], repr(float(value)), len(rows)])
    print(args.out)
    return EXIT_OK


def _kan_params(model, layer_name: str | None) -> tuple[str, KanLinearParams]:
    kan_layers = [layer for layer in model.layers if layer.op == "kan"]
    if not kan_layers:
        raise UsageError("checkpoint has no KAN layers (is it a U-Net?)")
    if layer_name is None:
        layer = kan_layers[0]
    else:
        matches = [layer for layer in kan_layers if layer.name == layer_name]
        if not matches:
            raise UsageError(f"no KAN layer named {layer_name!r}; have {[l.name for l in kan_layers]}")
        layer = matches[0]
    bw, sc = (model.params[p] for p in layer.params)
    return layer.name, KanLinearParams(bw, sc, model.config.kan_grid)


def cmd_activations(args) -> int:
    model = load_checkpoint(args.checkpoint)
    name, params = _kan_params(model, args.layer)
    thresholds = [float(t) for t in args.thresholds.split(",")]
    xs = probe_points(params.grid)
    os.makedirs(args.out, exist_ok=True)
    export_activation_curves(params, os.path.join(args.out, "curves"), xs)
    fractions = activation_variance_report(params, xs, thresholds)
    _write_json({"layer": name, "thresholds": thresholds, "fraction_below": [float(f) for f in fractions],
                 "edges": params.in_dim * params.out_dim, "probes": int(xs.size)},
                os.path.join(args.out, "variance.json"))
    print(f"{params.in_dim * params.out_dim} activation curves -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kanseg", description=__doc__.strip().splitlines()[0])
    parser.add_argument("--threads", type=int, default=None, help="parallel inference workers")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic crop-field dataset")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--channels", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ratios", default=",".join(str(r) for r in DEFAULT_RATIOS))
    p.add_argument("--max-retries", type=int, default=20)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a U-Net or U-KAN")
    p.add_argument("--data", required=True)
    p.add_argument("--model", choices=("unet", "ukan"), required=True)
    p.add_argument("--config", help="model config JSON")
    p.add_argument("--train-config", help="training config JSON")
    p.add_argument("--paper-protocol", action="store_true",
                   help="lr 1e-4, batch 16, 60 epochs, plateau factor 0.2 / patience 5")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics of a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", help="Grad-CAM maps, plausibility and sufficiency")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--layer")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("relevance", help="per-channel relevance table")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--layer")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_relevance)

    p = sub.add_parser("activations", help="export learned KAN activations")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layer")
    p.add_argument("--thresholds", default="1.0,0.1")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_activations)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"kanseg: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigurationError, LoadError, DimensionError, ValueError, TypeError,
            FileNotFoundError, KeyError) as exc:
        print(f"kanseg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
