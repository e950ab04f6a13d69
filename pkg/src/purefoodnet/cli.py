"""Command-line surface for the engine.

Commands: train, finetune, eval, predict, inspect, diagnose,
`dataio dump-batch`, `augment preview`. Exit codes: 0 success, 2 config
error, 3 data or I/O error, 4 weight/spec mismatch.

Settings resolve with precedence flag > config file > default. The config
file is flat `key = value` text; keys match the long flag names with
underscores ('#' starts a comment).
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import dataio, evaluation, models, training
from .augment import AugmentPolicy, apply_policy, policy_rng
from .errors import (ConfigError, DataError, DataFormatError, EngineError,
                     WeightDigestError)
from .seeding import derive_seed
from .tensor import Tensor4, atomic_write_bytes, save_tensor

__all__ = ["RunConfig", "main", "main_entry"]


# ---------------------------------------------------------------------------
# Configuration


def _parse_int(text):
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"expected an integer, got {text!r}") from None


def _parse_float(text):
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"expected a number, got {text!r}") from None


def _parse_patience(text):
    if str(text).lower() in ("none", "off"):
        return None
    return _parse_int(text)


def _parse_pair(text):
    parts = str(text).split(",")
    if len(parts) != 2:
        raise ConfigError(f"expected 'low,high', got {text!r}")
    return (_parse_float(parts[0]), _parse_float(parts[1]))


def _parse_triple(text):
    parts = str(text).split(",")
    if len(parts) != 3:
        raise ConfigError(f"expected 'train,val,test', got {text!r}")
    return tuple(_parse_float(p) for p in parts)


def _parse_counts(text):
    if str(text).lower() in ("none", "off"):
        return None
    parts = str(text).split(",")
    if len(parts) != 3:
        raise ConfigError(f"expected 'train,val,test' counts, got {text!r}")
    return tuple(_parse_int(p) for p in parts)


_CONVERTERS = {
    "model": str,
    "dataset_root": str,
    "manifest": str,
    "out_dir": str,
    "epochs": _parse_int,
    "batch_size": _parse_int,
    "learning_rate": _parse_float,
    "momentum": _parse_float,
    "decay_factor": _parse_float,
    "decay_interval": _parse_int,
    "patience": _parse_patience,
    "l2_strength": _parse_float,
    "l1_strength": _parse_float,
    "seed": _parse_int,
    "input_side": _parse_int,
    "width_scale": _parse_float,
    "num_classes": _parse_int,
    "head_units": _parse_int,
    "dropout_rate": _parse_float,
    "split_ratios": _parse_triple,
    "split_counts": _parse_counts,
    "aug_flip": _parse_float,
    "aug_crop": _parse_pair,
    "aug_tilt": _parse_pair,
    "aug_color_shift": _parse_float,
    "aug_rotation": _parse_pair,
    "aug_noise": _parse_float,
    "aug_contrast": _parse_pair,
}


@dataclass(frozen=True)
class RunConfig:
    """Resolved settings for the training-style commands."""

    model: str = "purefoodnet"
    dataset_root: str = None
    manifest: str = None
    out_dir: str = "run"
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.9
    decay_factor: float = 0.5
    decay_interval: int = 20
    patience: int = 5
    l2_strength: float = 0.0
    l1_strength: float = 0.0
    seed: int = 0
    input_side: int = 224
    width_scale: float = 1.0
    num_classes: int = None
    head_units: int = 512
    dropout_rate: float = 0.5
    split_ratios: tuple = (0.8, 0.1, 0.1)
    split_counts: tuple = None
    aug_flip: float = 0.0
    aug_crop: tuple = (1.0, 1.0)
    aug_tilt: tuple = (0.0, 0.0)
    aug_color_shift: float = 0.0
    aug_rotation: tuple = (0.0, 0.0)
    aug_noise: float = 0.0
    aug_contrast: tuple = (1.0, 1.0)

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if not self.out_dir:
            raise ConfigError("out_dir must be non-empty")

    def policy(self) -> AugmentPolicy:
        return AugmentPolicy(flip_probability=self.aug_flip,
                             crop_fraction_range=self.aug_crop,
                             tilt_range=self.aug_tilt,
                             color_shift_magnitude=self.aug_color_shift,
                             rotation_range=self.aug_rotation,
                             noise_sigma=self.aug_noise,
                             contrast_range=self.aug_contrast,
                             seed=derive_seed(self.seed, "augment"))


def _read_config_file(path) -> dict:
    values = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.rstrip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _CONVERTERS:
            raise ConfigError(f"{path}:{lineno}: unknown setting {key!r}")
        values[key] = value
    return values


def _resolve_config(args) -> RunConfig:
    """Merge defaults, config file, then flags (flags win)."""
    raw = {}
    if getattr(args, "config", None):
        raw.update(_read_config_file(args.config))
    for key in _CONVERTERS:
        flag = getattr(args, key, None)
        if flag is not None:
            raw[key] = flag
    typed = {key: _CONVERTERS[key](value) for key, value in raw.items()}
    return RunConfig(**typed)


def _add_config_flags(parser, keys):
    parser.add_argument("--config", help="flat key = value settings file")
    for key in keys:
        parser.add_argument("--" + key.replace("_", "-"), dest=key, default=None,
                            help=f"override {key} (default {getattr(RunConfig, key)!r})")


_TRAIN_KEYS = tuple(_CONVERTERS)
_AUG_KEYS = ("aug_flip", "aug_crop", "aug_tilt", "aug_color_shift",
             "aug_rotation", "aug_noise", "aug_contrast")


# ---------------------------------------------------------------------------
# Shared plumbing


def _ensure_out_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def _resolve_manifest(cfg: RunConfig) -> dataio.DatasetManifest:
    if cfg.manifest:
        return dataio.load_manifest(cfg.manifest, root=cfg.dataset_root)
    if not cfg.dataset_root:
        raise ConfigError("need either a manifest or a dataset_root")
    if cfg.split_counts is not None:
        return dataio.build_manifest(cfg.dataset_root, counts=cfg.split_counts,
                                     seed=cfg.seed)
    return dataio.build_manifest(cfg.dataset_root, ratios=cfg.split_ratios,
                                 seed=cfg.seed)


def _model_input_side(spec: models.ModelSpec) -> int:
    h, w, _ = spec.input_shape
    if h != w:
        raise ConfigError(f"model input {h}x{w} is not square; cannot pack batches")
    return h


def _resolve_spec(cfg: RunConfig, n_classes: int) -> models.ModelSpec:
    if cfg.model == "purefoodnet":
        return models.build_purefoodnet(cfg.num_classes or n_classes,
                                        width_scale=cfg.width_scale,
                                        input_side=cfg.input_side,
                                        dropout_rate=cfg.dropout_rate)
    return models.load_model_spec(cfg.model)


def _batch_sources(cfg: RunConfig, manifest, side):
    policy = cfg.policy()

    def train_source(epoch):
        return dataio.batch_iterator(manifest, "train", cfg.batch_size, side,
                                     seed=derive_seed(cfg.seed, "shuffle", epoch),
                                     policy=policy)

    has_val = any(r.split == "val" for r in manifest.records)
    if not has_val:
        return train_source, None, None

    def val_source():
        return dataio.batch_iterator(manifest, "val", cfg.batch_size, side)

    return train_source, val_source, cfg.patience


def _train_and_write(cfg: RunConfig, spec, params, manifest) -> int:
    out_dir = _ensure_out_dir(cfg.out_dir)
    side = _model_input_side(spec)
    train_source, val_source, patience = _batch_sources(cfg, manifest, side)
    if cfg.epochs == 0:
        history = []
    else:
        config = training.TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size,
                                      learning_rate=cfg.learning_rate,
                                      momentum=cfg.momentum,
                                      decay_factor=cfg.decay_factor,
                                      decay_interval=cfg.decay_interval,
                                      patience=patience,
                                      l2_strength=cfg.l2_strength,
                                      l1_strength=cfg.l1_strength,
                                      seed=cfg.seed)
        result = training.train(spec, params, train_source, val_source, config)
        params = result.params
        history = result.history
        print(f"trained {len(history)} epochs; best epoch {result.best_epoch}"
              f" (val top1 {result.best_val_top1!r})"
              f"{' [early stop]' if result.stopped_early else ''}")
    models.save_model_spec(os.path.join(out_dir, "model.spec"), spec)
    models.save_weights(os.path.join(out_dir, "weights.pfw"), spec, params)
    training.write_history_csv(os.path.join(out_dir, "history.csv"), history)
    dataio.save_manifest(os.path.join(out_dir, "manifest.txt"), manifest)
    print(f"artifacts written to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# Commands


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    manifest = _resolve_manifest(cfg)
    spec = _resolve_spec(cfg, len(manifest.classes))
    params = models.init_params(spec, seed=cfg.seed)
    return _train_and_write(cfg, spec, params, manifest)


def cmd_finetune(args) -> int:
    cfg = _resolve_config(args)
    base_spec = models.load_model_spec(args.base_spec)
    base_params = models.load_weights(args.base_weights, base_spec)
    manifest = _resolve_manifest(cfg)
    new_classes = cfg.num_classes or len(manifest.classes)
    backbone_spec, backbone_params = models.strip_top_layers(base_spec, base_params)
    spec, params = models.attach_head(backbone_spec, backbone_params, new_classes,
                                      units=cfg.head_units,
                                      dropout_rate=cfg.dropout_rate,
                                      seed=derive_seed(cfg.seed, "head"))
    if args.freeze_backbone:
        frozen = [layer.name for layer in backbone_spec.layers]
        spec = models.set_trainable(spec, frozen, False)
        print(f"froze {len(frozen)} backbone layers")
    return _train_and_write(cfg, spec, params, manifest)


def _parse_ks(text) -> tuple:
    try:
        return tuple(int(k) for k in str(text).split(","))
    except ValueError:
        raise ConfigError(f"expected comma-separated k values, got {text!r}") from None


def cmd_eval(args) -> int:
    spec = models.load_model_spec(args.spec)
    params = models.load_weights(args.weights, spec)
    manifest = dataio.load_manifest(args.manifest, root=args.dataset_root)
    side = _model_input_side(spec)
    ks = _parse_ks(args.ks)
    batches = dataio.batch_iterator(manifest, args.split, int(args.batch_size), side)
    report = evaluation.evaluate(spec, params, batches, ks=ks)
    summary = " ".join(f"top{k}={report.accuracy(k)!r}" for k in report.ks)
    print(f"N={report.n_samples} {summary}")
    if args.out:
        text = evaluation.report_to_csv(report, class_names=manifest.classes)
        atomic_write_bytes(args.out, text.encode("utf-8"))
        print(f"report written to {args.out}")
    return 0


def _class_names(manifest_path, n: int):
    if manifest_path:
        return dataio.load_manifest(manifest_path).classes
    return tuple(f"class_{i}" for i in range(n))


def cmd_predict(args) -> int:
    spec = models.load_model_spec(args.spec)
    params = models.load_weights(args.weights, spec)
    side = _model_input_side(spec)
    image = dataio.load_image(args.image).pixels
    packed = dataio.pack_image(image, side)
    x = Tensor4(packed[np.newaxis].astype(np.float32))
    scores = models.forward(spec, params, x).data.reshape(-1).astype(np.float64)
    names = _class_names(args.manifest, scores.shape[0])
    if len(names) != scores.shape[0]:
        raise ConfigError(f"manifest has {len(names)} classes, model outputs {scores.shape[0]}")
    for index in evaluation.top_k_candidates(scores, int(args.k)):
        print(f"{names[index]} {float(scores[index])!r}")
    return 0


def _activation_grid(act: np.ndarray) -> np.ndarray:
    """Tile (h, w, c) maps into one grayscale image, each map min-max scaled.

    Non-spatial (1x1) activations render as a single-pixel-tall strip.
    """
    h, w, c = act.shape
    scaled = np.zeros_like(act, dtype=np.float64)
    for j in range(c):
        channel = act[:, :, j].astype(np.float64)
        span = channel.max() - channel.min()
        if span > 0:
            scaled[:, :, j] = (channel - channel.min()) / span
    if h == 1 and w == 1:
        return scaled.reshape(1, c)
    grid_cols = math.ceil(math.sqrt(c))
    grid_rows = math.ceil(c / grid_cols)
    grid = np.zeros((grid_rows * h, grid_cols * w), dtype=np.float64)
    for j in range(c):
        row, col = divmod(j, grid_cols)
        grid[row * h:(row + 1) * h, col * w:(col + 1) * w] = scaled[:, :, j]
    return grid


def cmd_inspect(args) -> int:
    spec = models.load_model_spec(args.spec)
    params = models.load_weights(args.weights, spec)
    side = _model_input_side(spec)
    out_dir = _ensure_out_dir(args.out_dir)
    image = dataio.load_image(args.image).pixels
    x = Tensor4(dataio.pack_image(image, side)[np.newaxis].astype(np.float32))
    if args.layers:
        names = [name.strip() for name in args.layers.split(",")]
    else:
        names = [layer.name for layer in spec.layers if layer.kind == "conv"]
    captured = models.capture_activations(spec, params, x, names)
    for name in names:
        grid = _activation_grid(captured[name].data[0])
        path = os.path.join(out_dir, f"{name}.pgm")
        dataio.write_pgm(path, grid)
        print(f"{name}: grid {grid.shape[0]}x{grid.shape[1]} -> {path}")
    report = models.dead_filter_report(spec, params, x, threshold=float(args.threshold))
    lines = []
    for liveness in report:
        shown = ",".join(str(i) for i in liveness.dead) or "-"
        lines.append(f"{liveness.layer}\t{len(liveness.dead)}/{liveness.filter_count}"
                     f"\t{shown}")
    text = "layer\tdead/total\tdead_indices\n" + "".join(line + "\n" for line in lines)
    report_path = os.path.join(out_dir, "dead_filters.txt")
    atomic_write_bytes(report_path, text.encode("utf-8"))
    total_dead = sum(len(liveness.dead) for liveness in report)
    print(f"dead filters: {total_dead} (report {report_path})")
    return 0


def cmd_diagnose(args) -> int:
    try:
        history = training.read_history_csv(args.history)
    except DataFormatError as exc:
        # A bad history file is a usage problem for this command.
        raise ConfigError(str(exc)) from exc
    thresholds = training.FitThresholds(low_error=float(args.low_error),
                                        high_error=float(args.high_error),
                                        gap=float(args.gap))
    verdict = training.diagnose_fit(history, thresholds)
    print(f"{verdict.label} train_error={verdict.train_error!r}"
          f" val_error={verdict.val_error!r} gap={verdict.gap!r}")
    return 0


def cmd_dump_batch(args) -> int:
    manifest = dataio.load_manifest(args.manifest, root=args.dataset_root)
    seed = None if args.seed is None else int(args.seed)
    out_dir = _ensure_out_dir(args.out_dir)
    batches = dataio.batch_iterator(manifest, args.split, int(args.batch_size),
                                    int(args.input_side), seed=seed)
    x, labels = next(iter(batches))
    save_tensor(os.path.join(out_dir, "batch.pft"), x)
    labels4 = Tensor4(labels.reshape(1, 1, *labels.shape))
    save_tensor(os.path.join(out_dir, "batch_labels.pft"), labels4)
    print(f"wrote batch {x.shape.as_tuple()} and labels {labels.shape} to {out_dir}")
    return 0


def cmd_augment_preview(args) -> int:
    cfg = _resolve_config(args)
    out_dir = _ensure_out_dir(args.out_dir)
    image = dataio.load_image(args.image).pixels
    policy = cfg.policy()
    dataio.save_image(os.path.join(out_dir, "before.ppm"), image)
    for i in range(int(args.count)):
        out = apply_policy(image, policy, policy_rng(policy, i))
        dataio.save_image(os.path.join(out_dir, f"after_{i}.ppm"), out)
    print(f"wrote 1 original + {args.count} augmented previews to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# Parser


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="purefoodnet",
        description="Train, tune, and inspect small convolutional classifiers.")
    commands = parser.add_subparsers(dest="command", required=True)

    p_train = commands.add_parser("train", help="train a model from scratch")
    _add_config_flags(p_train, _TRAIN_KEYS)
    p_train.set_defaults(handler=cmd_train)

    p_tune = commands.add_parser("finetune", help="re-head a trained model and train")
    p_tune.add_argument("--base-spec", required=True, help="spec of the trained model")
    p_tune.add_argument("--base-weights", required=True, help="weights of the trained model")
    p_tune.add_argument("--freeze-backbone", action="store_true",
                        help="train only the new head")
    _add_config_flags(p_tune, _TRAIN_KEYS)
    p_tune.set_defaults(handler=cmd_finetune)

    p_eval = commands.add_parser("eval", help="measure top-k accuracy on a split")
    p_eval.add_argument("--spec", required=True)
    p_eval.add_argument("--weights", required=True)
    p_eval.add_argument("--manifest", required=True)
    p_eval.add_argument("--dataset-root", default=None, help="override manifest root")
    p_eval.add_argument("--split", default="test", choices=dataio.SPLITS)
    p_eval.add_argument("--ks", default="1,5", help="comma-separated k values")
    p_eval.add_argument("--batch-size", default=32)
    p_eval.add_argument("--out", default=None, help="write a per-class report CSV here")
    p_eval.set_defaults(handler=cmd_eval)

    p_pred = commands.add_parser("predict", help="classify one image")
    p_pred.add_argument("--spec", required=True)
    p_pred.add_argument("--weights", required=True)
    p_pred.add_argument("--image", required=True)
    p_pred.add_argument("--k", default=1)
    p_pred.add_argument("--manifest", default=None, help="source of class names")
    p_pred.set_defaults(handler=cmd_predict)

    p_ins = commands.add_parser("inspect", help="render activation grids")
    p_ins.add_argument("--spec", required=True)
    p_ins.add_argument("--weights", required=True)
    p_ins.add_argument("--image", required=True)
    p_ins.add_argument("--layers", default=None,
                       help="comma-separated layer names (default: every conv)")
    p_ins.add_argument("--out-dir", default="inspect")
    p_ins.add_argument("--threshold", default=1e-6,
                       help="peak activation at or below this counts as dead")
    p_ins.set_defaults(handler=cmd_inspect)

    p_diag = commands.add_parser("diagnose", help="classify a history as under/overfitting")
    p_diag.add_argument("--history", required=True, help="history CSV from train")
    p_diag.add_argument("--low-error", default=0.10)
    p_diag.add_argument("--high-error", default=0.30)
    p_diag.add_argument("--gap", default=0.15)
    p_diag.set_defaults(handler=cmd_diagnose)

    p_dataio = commands.add_parser("dataio", help="dataset utilities")
    dataio_sub = p_dataio.add_subparsers(dest="subcommand", required=True)
    p_dump = dataio_sub.add_parser("dump-batch", help="write one batch as PFT1 tensors")
    p_dump.add_argument("--manifest", required=True)
    p_dump.add_argument("--dataset-root", default=None)
    p_dump.add_argument("--split", default="train", choices=dataio.SPLITS)
    p_dump.add_argument("--batch-size", default=8)
    p_dump.add_argument("--input-side", default=32)
    p_dump.add_argument("--seed", default=None)
    p_dump.add_argument("--out-dir", default="dump")
    p_dump.set_defaults(handler=cmd_dump_batch)

    p_aug = commands.add_parser("augment", help="augmentation utilities")
    aug_sub = p_aug.add_subparsers(dest="subcommand", required=True)
    p_prev = aug_sub.add_parser("preview", help="write before/after image pairs")
    p_prev.add_argument("--image", required=True)
    p_prev.add_argument("--count", default=4)
    p_prev.add_argument("--out-dir", default="preview")
    _add_config_flags(p_prev, ("seed",) + _AUG_KEYS)
    p_prev.set_defaults(handler=cmd_augment_preview)

    return parser


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:
        code = exc.code if isinstance(exc.code, int) else 2
        return 0 if code == 0 else 2
    try:
        return args.handler(args)
    except WeightDigestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (DataError, DataFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (EngineError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main_entry() -> None:
    sys.exit(main())
