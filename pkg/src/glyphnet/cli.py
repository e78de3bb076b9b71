"""Command-line entry point: synth, cv, train, eval, and explain.

Configuration comes from a JSON file merged under flag overrides
(flag > file > default); the fully resolved config is logged once and
echoed into ``run_manifest.json`` next to the run's outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import (
    DEFAULT_CLASS_MAP,
    AugmentConfig,
    Sample,
    decode_image,
    load_dataset,
    preprocess,
    synth_glyphs,
    write_dataset_png,
)
from .exceptions import ClassMismatch, ConfigError, CorruptImage, GlyphnetError
from .explain import colormap_overlay, emit_png, grad_cam, predict_probabilities
from .layers import ModelConfig, mv3_mini_config
from .training import (
    TrainConfig,
    checkpoint_from_model,
    evaluate,
    fit_model,
    load_checkpoint,
    restore_model,
    run_cross_validation,
    save_checkpoint,
)

__all__ = ["main"]


class _StageFailure(Exception):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (GlyphnetError, OSError) as e:
        raise _StageFailure(name, e) from e


# ---------------------------------------------------------------------------
# config loading


def _typed(doc: dict, key: str, expected: type, default, path: str):
    if key not in doc:
        return default
    value = doc[key]
    if value is None:
        return default
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, expected) or isinstance(value, bool) and expected is not bool:
        raise ConfigError(
            f"config key '{path}{key}': expected {expected.__name__}, "
            f"got {type(value).__name__}"
        )
    return value


def load_run_config(path: str | None, overrides: dict) -> dict:
    """Merge defaults, the JSON file, and CLI overrides into one dict."""
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config root: expected object")

    model_doc = _typed(doc, "model", dict, {}, "")
    train_doc = _typed(doc, "train", dict, {}, "")
    augment_doc = _typed(doc, "augment", dict, None, "")
    data_doc = _typed(doc, "data", dict, {}, "")

    try:
        model_cfg = (
            ModelConfig.from_dict(model_doc) if model_doc else mv3_mini_config()
        )
    except TypeError as e:
        raise ConfigError(f"config key 'model': {e}") from None
    try:
        train_cfg = TrainConfig.from_dict(train_doc)
    except TypeError as e:
        raise ConfigError(f"config key 'train': {e}") from None

    if augment_doc is None:
        augment_cfg = AugmentConfig(seed=train_cfg.seed)
    else:
        try:
            augment_cfg = AugmentConfig(**augment_doc)
        except TypeError as e:
            raise ConfigError(f"config key 'augment': {e}") from None

    resolved = {
        "model": model_cfg,
        "train": train_cfg,
        "augment": augment_cfg,
        "data_root": _typed(data_doc, "root", str, None, "data."),
        "test_root": _typed(data_doc, "test_root", str, None, "data."),
        "class_map": _typed(data_doc, "class_map", dict, dict(DEFAULT_CLASS_MAP), "data."),
        "out_dir": _typed(doc, "out_dir", str, "runs/latest", ""),
    }

    if overrides.get("seed") is not None:
        seed = int(overrides["seed"])
        resolved["train"] = replace(resolved["train"], seed=seed)
        resolved["augment"] = replace(resolved["augment"], seed=seed)
    if overrides.get("folds") is not None:
        resolved["train"] = replace(resolved["train"], k_folds=int(overrides["folds"]))
    if overrides.get("out") is not None:
        resolved["out_dir"] = overrides["out"]
    if overrides.get("data") is not None:
        resolved["data_root"] = overrides["data"]
    return resolved


def _config_echo(resolved: dict) -> dict:
    return {
        "model": resolved["model"].to_dict(),
        "train": resolved["train"].to_dict(),
        "augment": {
            "rotation_max_deg": resolved["augment"].rotation_max_deg,
            "flip_prob": resolved["augment"].flip_prob,
            "zoom_range": list(resolved["augment"].zoom_range),
            "noise_sigma": resolved["augment"].noise_sigma,
            "seed": resolved["augment"].seed,
        },
        "data_root": resolved["data_root"],
        "test_root": resolved["test_root"],
        "class_map": resolved["class_map"],
        "out_dir": resolved["out_dir"],
    }


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_manifest(out_dir: Path, command: str, resolved: dict, started: float,
                    outputs: list[str]) -> None:
    _write_json(
        out_dir / "run_manifest.json",
        {
            "command": command,
            "config": _config_echo(resolved),
            "seed": resolved["train"].seed,
            "wall_time_seconds": time.time() - started,
            "outputs": sorted(outputs),
        },
    )


# ---------------------------------------------------------------------------
# subcommands


def _cmd_synth(args) -> int:
    out_dir = Path(args.out)
    dataset = _stage("synth_glyphs", synth_glyphs, args.n, args.seed)
    written = _stage("write_dataset", write_dataset_png, dataset, out_dir)
    print(f"wrote {len(written)} PNGs across {len(dataset.class_names)} classes to {out_dir}")
    return 0


def _metrics_csv(reports) -> str:
    lines = ["fold,precision,recall,f1,accuracy"]
    for r in reports:
        lines.append(
            f"{r.fold_id + 1},{r.macro_precision:.4f},{r.macro_recall:.4f},"
            f"{r.macro_f1:.4f},{r.accuracy:.4f}"
        )
    return "\n".join(lines) + "\n"


def _cmd_cv(args) -> int:
    started = time.time()
    resolved = _stage("load_config", load_run_config, args.config, vars(args))
    if resolved["data_root"] is None:
        raise _StageFailure("load_dataset", ConfigError("no dataset path configured (data.root or --data)"))
    print("resolved config: " + json.dumps(_config_echo(resolved), sort_keys=True))

    dataset = _stage("load_dataset", load_dataset, resolved["data_root"], resolved["class_map"])
    test_dataset = None
    if resolved["test_root"]:
        test_dataset = _stage("load_dataset", load_dataset, resolved["test_root"], resolved["class_map"])

    out_dir = Path(resolved["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    result = _stage(
        "run_cross_validation",
        run_cross_validation,
        dataset,
        resolved["model"],
        resolved["train"],
        augment_cfg=resolved["augment"],
        out_dir=out_dir,
        test_dataset=test_dataset,
        log=print,
    )

    (out_dir / "metrics.csv").write_text(_metrics_csv(result.fold_reports))
    _write_json(
        out_dir / "metrics.json",
        {
            "folds": [r.to_dict() for r in result.fold_reports],
            "aggregate": {
                "mean_accuracy": float(np.mean([r.accuracy for r in result.fold_reports])),
                "mean_macro_f1": float(np.mean([r.macro_f1 for r in result.fold_reports])),
                "best_fold": result.best_fold + 1,
                "best_val_accuracy": result.best_val_accuracy,
            },
            "test": result.test_report.to_dict() if result.test_report else None,
            "history": result.histories,
        },
    )
    _write_json(
        out_dir / "confusion.json",
        {
            "class_names": dataset.class_names,
            "folds": [cm.to_lists() for cm in result.fold_confusions],
            "test": result.test_confusion.to_lists() if result.test_confusion else None,
        },
    )
    if dataset.skipped:
        _write_json(out_dir / "skipped.json", dataset.skipped)
    outputs = ["metrics.csv", "metrics.json", "confusion.json"] + [
        str(p.relative_to(out_dir)) for p in result.checkpoint_paths
    ]
    _write_manifest(out_dir, "cv", resolved, started, outputs)

    for r in result.fold_reports:
        print(
            f"fold {r.fold_id + 1}: precision={r.macro_precision:.4f} "
            f"recall={r.macro_recall:.4f} f1={r.macro_f1:.4f} accuracy={r.accuracy:.4f}"
        )
    if result.test_report:
        print(f"test accuracy (best fold {result.best_fold + 1}): {result.test_report.accuracy:.4f}")
    return 0


def _cmd_train(args) -> int:
    started = time.time()
    resolved = _stage("load_config", load_run_config, args.config, vars(args))
    if resolved["data_root"] is None:
        raise _StageFailure("load_dataset", ConfigError("no dataset path configured (data.root or --data)"))
    print("resolved config: " + json.dumps(_config_echo(resolved), sort_keys=True))

    dataset = _stage("load_dataset", load_dataset, resolved["data_root"], resolved["class_map"])
    init = None
    if args.init:
        init = _stage("load_checkpoint", load_checkpoint, args.init)

    out_dir = Path(resolved["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    model, opt_state, history = _stage(
        "fit_model",
        fit_model,
        dataset.samples,
        resolved["model"],
        resolved["train"],
        augment_cfg=resolved["augment"],
        init=init,
        log=print,
    )
    ckpt = checkpoint_from_model(
        model,
        {
            "seed": resolved["train"].seed,
            "fold": -1,
            "epoch": resolved["train"].epochs - 1,
            "val_accuracy": history[-1]["train_accuracy"],
            "class_names": dataset.class_names,
        },
        optimizer=opt_state,
    )
    _stage("save_checkpoint", save_checkpoint, ckpt, out_dir / "model.ckpt")
    _write_json(out_dir / "history.json", history)
    _write_manifest(out_dir, "train", resolved, started, ["model.ckpt", "history.json"])
    print(f"saved checkpoint to {out_dir / 'model.ckpt'}")
    return 0


def _check_class_dirs(root, num_classes: int):
    present = sorted(p.name for p in Path(root).iterdir() if p.is_dir())
    if len(present) != num_classes:
        raise ClassMismatch(
            f"checkpoint has {num_classes} classes, dataset offers "
            f"{len(present)} class directories {present}"
        )


def _cmd_eval(args) -> int:
    ckpt = _stage("load_checkpoint", load_checkpoint, args.checkpoint)
    class_names = ckpt.metadata.get("class_names")
    class_map = (
        {name: i for i, name in enumerate(class_names)}
        if class_names
        else dict(DEFAULT_CLASS_MAP)
    )
    _stage("load_dataset", _check_class_dirs, args.data, ckpt.model_config.num_classes)
    dataset = _stage("load_dataset", load_dataset, args.data, class_map)
    model = _stage("restore_model", restore_model, ckpt)
    cm, report, mean_loss = _stage("evaluate", evaluate, model, dataset.samples)

    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    print(f"mean loss: {mean_loss:.6f}")
    out_dir = Path(args.out)
    _write_json(
        out_dir / "confusion.json",
        {"class_names": dataset.class_names, "counts": cm.to_lists()},
    )
    return 0


def _collect_inputs(path: Path) -> list[Path]:
    if path.is_dir():
        return sorted(path.glob("*.png"))
    return [path]


def _cmd_explain(args) -> int:
    ckpt = _stage("load_checkpoint", load_checkpoint, args.checkpoint)
    model = _stage("restore_model", restore_model, ckpt)
    inputs = _collect_inputs(Path(args.input))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    succeeded = 0
    for path in inputs:
        try:
            pixels = decode_image(path.read_bytes())
        except (CorruptImage, OSError) as e:
            print(f"warning: skipping {path}: {e}", file=sys.stderr)
            continue
        image = preprocess(pixels)
        probs = predict_probabilities(model, image.data)
        predicted = int(probs.argmax())
        target = predicted if args.target is None else int(args.target)
        sample = Sample(image, predicted, str(path))
        heatmap = _stage("grad_cam", grad_cam, model, sample, target)
        overlay = colormap_overlay(image, heatmap, alpha=args.alpha)
        overlay_path = out_dir / f"{path.stem}_cam.png"
        _stage("emit_png", emit_png, overlay, overlay_path, args.scale)
        _write_json(
            out_dir / f"{path.stem}_cam.json",
            {
                "source_id": str(path),
                "predicted_class": predicted,
                "target_class": target,
                "probabilities": [float(p) for p in probs],
                "raw_max": heatmap.raw_max,
            },
        )
        print(f"{path}: predicted class {predicted}, overlay -> {overlay_path}")
        succeeded += 1
    if succeeded == 0:
        print("error: explain: no input image could be processed", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="glyphnet",
        description="Train, cross-validate, evaluate, and explain the glyph classifier.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic mirrored-glyph dataset")
    p.add_argument("--n", type=int, required=True, help="samples per class")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(fn=_cmd_synth)

    p = sub.add_parser("cv", help="stratified k-fold cross-validation")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--data", help="dataset root (one subdirectory per class)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--folds", type=int)
    p.set_defaults(fn=_cmd_cv)

    p = sub.add_parser("train", help="train on a full dataset (optional fine-tune)")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--data", help="dataset root")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--init", help="checkpoint to fine-tune from")
    p.set_defaults(fn=_cmd_train, folds=None)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=".")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("explain", help="write Grad-CAM overlays for images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="PNG file or directory of PNGs")
    p.add_argument("--out", default="explained")
    p.add_argument("--target", type=int, help="class to explain (default: prediction)")
    p.add_argument("--scale", type=int, default=4, help="nearest-neighbor upscale factor")
    p.add_argument("--alpha", type=float, default=0.4, help="heatmap blend weight")
    p.set_defaults(fn=_cmd_explain)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except _StageFailure as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except GlyphnetError as e:
        print(f"error: {args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
