"""Command-line entry point: ``goelan {train,eval,detect,dataset-stats,bench}``.

Exit status is 0 on success, 1 on a usage or input error and 2 on an
internal failure.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import sys
import traceback
from collections import Counter
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np
import torch

from goelan.config import PRESETS, ConfigError, ModelConfig, preset_config
from goelan.data.augment import resize
from goelan.data.manifest import (
    IMAGE_SUFFIXES,
    AnnotationError,
    DatasetError,
    Sample,
    load_manifest,
    parse_annotation_file,
    parse_detection_file,
    read_image,
)
from goelan.metrics import evaluate
from goelan.network import build_model, count_parameters, estimate_flops, strip_auxiliary
from goelan.structures import Detection, GroundTruthObject
from goelan.train import TrainingError, Trainer, detect_batch, evaluate_checkpoint, load_checkpoint

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2
USER_ERRORS = (ConfigError, DatasetError, AnnotationError, FileNotFoundError, TrainingError)

log = logging.getLogger("goelan")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # exit 1 instead of argparse's 2
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _config_keys(path: str) -> set[str]:
    parser = configparser.ConfigParser()
    parser.read_string(Path(path).read_text(encoding="utf-8"))
    return {k for s in parser.sections() for k in parser.options(s)}


def load_config(path: str | None, preset: str | None, overrides: dict[str, object]) -> tuple[ModelConfig, set[str]]:
    """Preset or config file, then command-line overrides; returns the keys set explicitly."""
    if path:
        if not Path(path).is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        base = preset_config(preset) if preset else None
        cfg = ModelConfig.from_ini(Path(path).read_text(encoding="utf-8"), base)
        explicit = _config_keys(path)
    else:
        cfg = preset_config(preset or "full")
        explicit = set()
    given = {k: v for k, v in overrides.items() if v is not None}
    return cfg.override(given), explicit | set(given)


def _parse_sets(items: Sequence[str]) -> dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="goelan", description="Go-ELAN detector toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a detector")
    t.add_argument("--config", help="INI config file (sections model/loss/augment/train)")
    t.add_argument("--preset", choices=sorted(PRESETS), help="base preset (default: full, or the file's 'preset' key)")
    t.add_argument("--data", required=True, help="dataset manifest (data.yaml)")
    t.add_argument("--epochs", type=int, help="default 20")
    t.add_argument("--batch", type=int, help="default 8")
    t.add_argument("--imgsz", type=int, help="default 640")
    t.add_argument("--seed", type=int, help="default 0")
    t.add_argument("--lr0", type=float, help="default 0.01")
    t.add_argument("--workers", type=int, help="data worker threads, default 0")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="any other config field")
    t.add_argument("--out", default="runs/train", help="run directory (default runs/train)")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--max-steps", type=int, help="stop after this many optimizer steps")

    e = sub.add_parser("eval", help="evaluate a checkpoint or saved detections")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--weights", help="checkpoint to run on the split")
    src.add_argument("--predictions", help="folder of per-image 'class score cx cy w h' files, as written by detect")
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val", choices=["train", "val", "test"])
    e.add_argument("--iou", type=float, default=0.5, help="IoU threshold for the reported mAP (default 0.5)")
    e.add_argument("--iou-range", action="store_true", help="also report mAP@0.5:0.95")
    e.add_argument("--conf", type=float, default=0.25, help="confidence for precision/recall/F1 (default 0.25)")
    e.add_argument("--nms-iou", type=float, default=0.45, help="default 0.45")
    e.add_argument("--out", help="write report.txt, confusion_matrix.csv and pr_curve.csv here")

    d = sub.add_parser("detect", help="run detection on a folder of images")
    d.add_argument("--weights", required=True)
    d.add_argument("--source", required=True, help="image file or directory")
    d.add_argument("--conf", type=float, default=0.25, help="default 0.25")
    d.add_argument("--nms-iou", type=float, default=0.45, help="default 0.45")
    d.add_argument("--max-det", type=int, default=300, help="default 300")
    d.add_argument("--out", default="runs/detect")

    s = sub.add_parser("dataset-stats", help="image counts and class histogram")
    s.add_argument("--data", required=True)

    b = sub.add_parser("bench", help="parameter count and FLOP estimate")
    b.add_argument("--config")
    b.add_argument("--preset", choices=sorted(PRESETS))
    b.add_argument("--imgsz", type=int)
    return p


def cmd_train(args: argparse.Namespace) -> int:
    manifest = load_manifest(args.data)
    overrides: dict[str, object] = dict(
        epochs=args.epochs, batch_size=args.batch, input_size=args.imgsz, seed=args.seed, lr0=args.lr0,
        workers=args.workers,
    )
    overrides.update(_parse_sets(args.set))
    cfg, explicit = load_config(args.config, args.preset, overrides)
    if "class_count" not in explicit:
        cfg = cfg.replace(class_count=manifest.class_count)
    result = Trainer(cfg, manifest, args.out, max_steps=args.max_steps, resume=args.resume).fit()
    print(f"run directory: {result.run_dir}")
    print(f"last checkpoint: {result.last}")
    print(f"best checkpoint: {result.best}")
    if result.final_report is not None:
        for k, v in result.final_report.summary().items():
            print(f"{k}: {v:.6f}")
    return EXIT_OK


def evaluate_predictions(folder: str | Path, manifest, split: str, conf_thresh: float):
    """Score saved detection files against ``split``; a missing file means no detections."""
    folder = Path(folder)
    if not folder.is_dir():
        raise FileNotFoundError(f"predictions folder not found: {folder}")
    dets, gts = [], []
    for img in manifest.images(split):
        label = manifest.label_path(img)
        gts.append(parse_annotation_file(label.read_text(encoding="utf-8"), manifest.class_count, str(label)))
        pred = folder / f"{img.stem}.txt"
        pairs = parse_detection_file(pred.read_text(encoding="utf-8"), manifest.class_count, str(pred)) \
            if pred.is_file() else []
        dets.append([Detection(o.to_bbox(1.0), o.class_id, score) for o, score in pairs])
    return evaluate(dets, gts, manifest.class_count, conf_thresh, image_size=1.0, class_names=manifest.class_names)


def cmd_eval(args: argparse.Namespace) -> int:
    manifest = load_manifest(args.data)
    if args.predictions:
        report = evaluate_predictions(args.predictions, manifest, args.split, args.conf)
    else:
        ckpt_cfg = load_checkpoint(args.weights).model.config
        cfg = ckpt_cfg.replace(conf_thresh=args.conf, nms_iou=args.nms_iou)
        report = evaluate_checkpoint(args.weights, manifest, args.split, cfg)
    print(f"mAP@{args.iou:g}: {report.map_at(args.iou):.6f}")
    if args.iou_range:
        print(f"mAP@0.5:0.95: {report.map50_95:.6f}")
    print(f"precision: {report.precision:.6f}")
    print(f"recall: {report.recall:.6f}")
    print(f"f1: {report.f1:.6f}")
    if args.out:
        report.save(args.out)
    return EXIT_OK


def _source_images(source: Path) -> list[Path]:
    if source.is_dir():
        return sorted(p for p in source.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
    if source.is_file():
        return [source]
    raise FileNotFoundError(f"source not found: {source}")


def format_detections(dets: Sequence[Detection], input_size: int) -> str:
    """``class score cx cy w h`` lines, normalized; boxes that round to zero size are dropped."""
    lines = []
    for d in dets:
        o = GroundTruthObject.from_bbox(d.class_id, d.box, input_size)
        if round(o.w, 6) <= 0 or round(o.h, 6) <= 0:
            continue
        vals = [min(1.0, max(0.0, v)) for v in (o.cx, o.cy, o.w, o.h)]
        lines.append(f"{d.class_id} {d.score:.6f} " + " ".join(f"{v:.6f}" for v in vals) + "\n")
    return "".join(lines)


def draw_detections(image: np.ndarray, dets: Sequence[Detection], input_size: int, names: Sequence[str]) -> np.ndarray:
    """Draw boxes on an RGB float image; returns BGR uint8 for writing."""
    h, w = image.shape[:2]
    out = cv2.cvtColor(np.clip(np.rint(image * 255), 0, 255).astype(np.uint8), cv2.COLOR_RGB2BGR)
    for d in dets:
        b = d.box.scaled(w / input_size, h / input_size)
        p1, p2 = (int(round(b.x1)), int(round(b.y1))), (int(round(b.x2)), int(round(b.y2)))
        cv2.rectangle(out, p1, p2, (0, 255, 255), 1)
        label = names[d.class_id] if d.class_id < len(names) else str(d.class_id)
        cv2.putText(out, f"{label} {d.score:.2f}", (p1[0], max(10, p1[1] - 2)), cv2.FONT_HERSHEY_SIMPLEX, 0.35,
                    (0, 255, 255), 1, cv2.LINE_AA)
    return out


def cmd_detect(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.weights)
    model = strip_auxiliary(ckpt.model)
    cfg = model.config.replace(conf_thresh=args.conf, nms_iou=args.nms_iou, max_detections=args.max_det)
    images = _source_images(Path(args.source))
    if not images:
        raise DatasetError(f"no images under {args.source}")
    out = Path(args.out)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    (out / "images").mkdir(parents=True, exist_ok=True)
    dtype = next(model.parameters()).dtype
    names = [str(i) for i in range(cfg.class_count)]
    for path in images:
        original = read_image(path)
        sample = resize(Sample(original, []), cfg.input_size)
        x = torch.from_numpy(np.ascontiguousarray(sample.image.transpose(2, 0, 1)))[None].to(dtype)
        dets = detect_batch(model, x, cfg, conf_thresh=cfg.conf_thresh)[0]
        (out / "labels" / f"{path.stem}.txt").write_text(format_detections(dets, cfg.input_size), encoding="utf-8")
        cv2.imwrite(str(out / "images" / f"{path.stem}.png"), draw_detections(original, dets, cfg.input_size, names))
        print(f"{path.name}: {len(dets)} detections")
    print(f"results written to {out}")
    return EXIT_OK


def cmd_dataset_stats(args: argparse.Namespace) -> int:
    manifest = load_manifest(args.data)
    total = 0
    overall: Counter[int] = Counter()
    for split, paths in manifest.splits.items():
        counts: Counter[int] = Counter()
        for img in paths:
            label = manifest.label_path(img)
            if not label.is_file():
                raise DatasetError(f"missing label file {label}")
            for o in parse_annotation_file(label.read_text(encoding="utf-8"), manifest.class_count, str(label)):
                counts[o.class_id] += 1
        overall.update(counts)
        total += len(paths)
        print(f"{split}: {len(paths)} images, {sum(counts.values())} objects")
    print(f"total: {total} images")
    print("class histogram:")
    for c, name in enumerate(manifest.class_names):
        print(f"  {c} {name}: {overall[c]}")
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    cfg, _ = load_config(args.config, args.preset, {"input_size": args.imgsz})
    with torch.device("meta"):
        model = build_model(cfg)
    stripped = strip_auxiliary(model)
    print(f"preset: {cfg.width_preset}")
    print(f"input: {cfg.input_size}x{cfg.input_size}")
    print(f"parameters (training, with auxiliary branch): {count_parameters(model):,} "
          f"({count_parameters(model) / 1e6:.2f}M)")
    print(f"parameters (inference): {count_parameters(stripped):,} ({count_parameters(stripped) / 1e6:.2f}M)")
    print(f"GFLOPs (training forward, MAC=2 FLOPs): {estimate_flops(model, cfg.input_size) / 1e9:.4g}")
    print(f"GFLOPs (inference): {estimate_flops(stripped, cfg.input_size) / 1e9:.4g}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "detect": cmd_detect,
    "dataset-stats": cmd_dataset_stats,
    "bench": cmd_bench,
}


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USER
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USER
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception:  # noqa: BLE001
        traceback.print_exc()
        print("internal error", file=sys.stderr)
        return EXIT_INTERNAL


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
