"""Command-line interface: train, predict, evaluate.

One YAML config file plus dotted overrides (``--section.key=value``) drive
every run; the resolved config is echoed into the output directory so any
run can be reproduced exactly from its artifacts.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import RunConfig, dump_run_config, load_run_config
from .data import IMAGE_EXTENSIONS, load_pair, normalize_image, scan_dataset
from .errors import HistosegError
from .inference import binarize, render_overlay, sliding_window_predict
from .metrics import dice_score, iou_score
from .pretrained import map_pretrained, read_manifest, write_mapping_report
from .train import TrainState, fit, init_train_state, load_checkpoint

OVERLAY_ALPHA = 0.4


def _split_overrides(tokens: list[str]) -> dict[str, str]:
    overrides: dict[str, str] = {}
    for token in tokens:
        if not token.startswith("--") or "=" not in token:
            raise HistosegError(
                f"unrecognized argument {token!r}; overrides look like "
                f"--section.key=value"
            )
        key, value = token[2:].split("=", 1)
        overrides[key] = value
    return overrides


def _resolve_config(args: argparse.Namespace,
                    extra: list[str]) -> RunConfig:
    overrides = _split_overrides(extra)
    if args.output is not None:
        overrides["output_dir"] = args.output
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    return load_run_config(args.config, overrides)


def cmd_train(args: argparse.Namespace, extra: list[str]) -> int:
    config = _resolve_config(args, extra)
    output_dir = Path(config.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    dump_run_config(config, output_dir / "config.yaml")

    records = scan_dataset(config.data.root)
    state = init_train_state(config)

    if config.pretrained_manifest:
        manifest = read_manifest(config.pretrained_manifest)
        report = map_pretrained(state.model, manifest)
        write_mapping_report(report, output_dir / "mapping_report.txt")
        print(
            f"pretrained: loaded {len(report.loaded)}, "
            f"skipped by policy {len(report.skipped_by_policy)}, "
            f"randomly initialized {len(report.randomly_initialized)}"
        )

    state, history = fit(state, records, output_dir)
    print(f"trained {state.epoch} epochs ({state.step} steps); "
          f"best mean dice {state.best_metric:.4f}")
    return 0


def _iter_input_images(input_path: Path) -> list[Path]:
    if input_path.is_dir():
        return sorted(
            p for p in input_path.iterdir()
            if p.suffix.lower() in IMAGE_EXTENSIONS and p.is_file()
        )
    return [input_path]


def _predict_image(state: TrainState, image_path: Path, config: RunConfig,
                   output_dir: Path, save_probabilities: bool) -> None:
    with Image.open(image_path) as img:
        rgb = np.asarray(img.convert("RGB"), dtype=np.uint8)
    normalized = torch.from_numpy(
        normalize_image(rgb, config.data.normalize_mean, config.data.normalize_std)
    )
    probabilities = sliding_window_predict(state.model, normalized, config.infer)
    mask = binarize(probabilities, config.infer.threshold)

    Image.fromarray(mask * 255).save(output_dir / f"{image_path.stem}_mask.png")
    overlay = render_overlay(rgb, mask, OVERLAY_ALPHA)
    Image.fromarray(overlay).save(output_dir / f"{image_path.stem}_overlay.png")
    if save_probabilities:
        Image.fromarray(probabilities.numpy().astype(np.float32), mode="F").save(
            output_dir / f"{image_path.stem}_prob.tiff"
        )


def cmd_predict(args: argparse.Namespace, extra: list[str]) -> int:
    config = _resolve_config(args, extra)
    output_dir = Path(config.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    state = load_checkpoint(args.checkpoint)
    # geometry/thresholds come from this run's config; weights fix the model

    inputs = _iter_input_images(Path(args.input))
    if not inputs:
        print(f"error: no images found under {args.input}", file=sys.stderr)
        return 1
    failures = 0
    for image_path in inputs:
        try:
            _predict_image(state, image_path, config, output_dir,
                           args.save_probabilities)
            print(f"predicted {image_path.name}")
        except (HistosegError, OSError) as exc:
            failures += 1
            print(f"error: {image_path}: {exc}", file=sys.stderr)
    if failures:
        print(f"{failures} of {len(inputs)} inputs failed", file=sys.stderr)
    return 1 if failures else 0


def cmd_evaluate(args: argparse.Namespace, extra: list[str]) -> int:
    config = _resolve_config(args, extra)
    output_dir = Path(config.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)

    records = scan_dataset(args.dataset)
    state = None
    if not args.use_masks_as_predictions:
        state = load_checkpoint(args.checkpoint)

    rows = []
    for record in records:
        image, truth = load_pair(record)
        if state is None:
            predicted = truth  # identity stub: metric plumbing check
        else:
            normalized = torch.from_numpy(normalize_image(
                image, config.data.normalize_mean, config.data.normalize_std
            ))
            probabilities = sliding_window_predict(state.model, normalized,
                                                   config.infer)
            predicted = binarize(probabilities, config.infer.threshold)
        d = dice_score(predicted, truth)
        i = iou_score(predicted, truth)
        rows.append((record.image_path.name, d, i))
        print(f"{record.image_path.name}\tdice={d:.4f}\tiou={i:.4f}")

    mean_dice = float(np.mean([r[1] for r in rows]))
    mean_iou = float(np.mean([r[2] for r in rows]))
    print(f"mean\tdice={mean_dice:.4f}\tiou={mean_iou:.4f}")

    with open(output_dir / "eval.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", "dice", "iou"])
        for name, d, i in rows:
            writer.writerow([name, f"{d:.6f}", f"{i:.6f}"])
        writer.writerow(["mean", f"{mean_dice:.6f}", f"{mean_iou:.6f}"])
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="histoseg",
        description="Train and run the windowed-transformer tumor segmenter.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", default=None, help="YAML config file")
        p.add_argument("--output", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="root random seed")

    p_train = sub.add_parser("train", help="train a model on an image/mask dataset")
    add_common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_predict = sub.add_parser("predict", help="segment images with a checkpoint")
    add_common(p_predict)
    p_predict.add_argument("--checkpoint", required=True)
    p_predict.add_argument("--input", required=True,
                           help="image file or directory of images")
    p_predict.add_argument("--save-probabilities", action="store_true",
                           help="also write 32-bit probability TIFFs")
    p_predict.set_defaults(func=cmd_predict)

    p_eval = sub.add_parser("evaluate", help="score a checkpoint against a dataset")
    add_common(p_eval)
    p_eval.add_argument("--checkpoint", default=None)
    p_eval.add_argument("--dataset", required=True,
                        help="dataset dir with image/ and mask/ subdirs")
    p_eval.add_argument("--use-masks-as-predictions", action="store_true",
                        help="identity stub: score ground truth against itself")
    p_eval.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    if args.command == "evaluate" and not args.use_masks_as_predictions \
            and not args.checkpoint:
        print("error: evaluate needs --checkpoint (or --use-masks-as-predictions)",
              file=sys.stderr)
        return 2
    try:
        return args.func(args, extra)
    except (HistosegError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
