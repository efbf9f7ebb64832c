"""SGD training with linear warmup, per-epoch validation and checkpointing."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch
import torch.nn as nn

from goelan.config import ConfigError, ModelConfig
from goelan.data.manifest import DatasetManifest
from goelan.data.pipeline import DetectionDataset, build_pipeline
from goelan.loss import assign_batch, total_loss
from goelan.metrics import EvalReport, evaluate
from goelan.network import Detector, build_model, forward_infer, strip_auxiliary
from goelan.postprocess import postprocess

log = logging.getLogger(__name__)

METRIC_COLUMNS = [
    "epoch", "lr", "momentum", "box_loss", "cls_loss", "dfl_loss", "val_mAP50", "val_mAP50_95",
    "obj_loss", "aux_loss", "total_loss", "val_box_loss", "val_cls_loss", "val_dfl_loss", "val_obj_loss",
]
SCHEDULE_COLUMNS = ["step", "epoch", "lr", "momentum"]


class TrainingError(RuntimeError):
    pass


def lr_momentum_schedule(step: float, steps_per_epoch: int, cfg: ModelConfig, total_steps: int | None = None) -> tuple[float, float]:
    """Learning rate and momentum at ``step``.

    Over the first ``warmup_epochs`` the rate ramps linearly from 0 to ``lr0``
    and momentum from ``warmup_momentum`` to ``momentum``. Afterwards the rate
    moves linearly from ``lr0`` to ``lr_final`` by the last step (constant when
    they are equal) and momentum stays fixed.
    """
    warmup = cfg.warmup_epochs * steps_per_epoch
    if warmup > 0 and step < warmup:
        frac = step / warmup
        return cfg.lr0 * frac, cfg.warmup_momentum + (cfg.momentum - cfg.warmup_momentum) * frac
    total = total_steps if total_steps is not None else cfg.epochs * steps_per_epoch
    if total <= warmup or cfg.lr_final == cfg.lr0:
        return cfg.lr0, cfg.momentum
    frac = min(1.0, (step - warmup) / (total - warmup))
    return cfg.lr0 + (cfg.lr_final - cfg.lr0) * frac, cfg.momentum


def make_optimizer(model: nn.Module, cfg: ModelConfig) -> torch.optim.SGD:
    """SGD with weight decay on conv/linear weights only (not norms or biases)."""
    decay, no_decay = [], []
    for module in model.modules():
        for name, p in module.named_parameters(recurse=False):
            if not p.requires_grad:
                continue
            if name == "weight" and not isinstance(module, nn.modules.batchnorm._BatchNorm):
                decay.append(p)
            else:
                no_decay.append(p)
    return torch.optim.SGD(
        [
            {"params": decay, "weight_decay": cfg.weight_decay},
            {"params": no_decay, "weight_decay": 0.0},
        ],
        lr=cfg.lr0,
        momentum=cfg.warmup_momentum,
    )


@dataclass
class TrainState:
    epoch: int = 0  # next epoch to run
    step: int = 0
    best_map50: float = -1.0
    seed: int = 0

    def record(self, map50: float) -> bool:
        if map50 > self.best_map50:
            self.best_map50 = map50
            return True
        return False


def weights_bytes(state_dict: dict[str, torch.Tensor]) -> bytes:
    buf = io.BytesIO()
    torch.save(state_dict, buf)
    return buf.getvalue()


def save_checkpoint(path: str | Path, model: Detector, state: TrainState, optimizer: torch.optim.Optimizer | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "weights": model.state_dict(),
        "config": model.config.to_dict(),
        "epoch": state.epoch,
        "step": state.step,
        "best_map50": state.best_map50,
        "seed": state.seed,
        "torch_rng": torch.get_rng_state(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
    }
    torch.save(payload, path)
    return path


@dataclass
class Checkpoint:
    model: Detector
    state: TrainState
    optimizer_state: dict[str, Any] | None
    torch_rng: torch.Tensor | None


def load_checkpoint(path: str | Path) -> Checkpoint:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    cfg = ModelConfig.from_dict(payload["config"])
    model = build_model(cfg)
    model.load_state_dict(payload["weights"])
    state = TrainState(payload["epoch"], payload["step"], payload["best_map50"], payload.get("seed", cfg.seed))
    return Checkpoint(model, state, payload.get("optimizer"), payload.get("torch_rng"))


def grid_scales(cfg: ModelConfig) -> list[tuple[int, int, int]]:
    return [(s, cfg.input_size // s, cfg.input_size // s) for s in cfg.head_strides]


def detect_batch(model: Detector, images: torch.Tensor, cfg: ModelConfig, conf_thresh: float | None = None):
    raw = forward_infer(model, images)
    conf = cfg.eval_conf_thresh if conf_thresh is None else conf_thresh
    return postprocess(raw, cfg.input_size, conf, cfg.nms_iou, cfg.max_detections)


def evaluate_model(model: Detector, manifest: DatasetManifest, split: str, cfg: ModelConfig | None = None,
                   dataset: DetectionDataset | None = None) -> tuple[EvalReport, dict[str, float]]:
    """Strip the auxiliary branch, run inference + decode + NMS + metrics on ``split``.

    Also returns mean main-branch loss components over the split.
    """
    cfg = cfg or model.config
    main_only = strip_auxiliary(model)
    main_only.eval()
    dets, gts = [], []
    sums: dict[str, float] = {}
    n_batches = 0
    for batch in build_pipeline(manifest, cfg, split, shuffle=False, augment_train=False, dataset=dataset):
        images = batch.images.to(next(main_only.parameters()).dtype)
        with torch.no_grad():
            raw = main_only.infer(images)
            targets = assign_batch(batch.targets, grid_scales(cfg), cfg.class_count, cfg.label_smoothing, images.dtype)
            parts = total_loss(raw, [], targets, cfg).as_floats()
        for k, v in parts.items():
            sums[k] = sums.get(k, 0.0) + v
        n_batches += 1
        dets.extend(postprocess(raw, cfg.input_size, cfg.eval_conf_thresh, cfg.nms_iou, cfg.max_detections))
        gts.extend(batch.targets)
    report = evaluate(dets, gts, cfg.class_count, cfg.conf_thresh, image_size=cfg.input_size,
                      class_names=manifest.class_names)
    return report, {k: v / max(1, n_batches) for k, v in sums.items()}


def evaluate_checkpoint(checkpoint: str | Path, manifest: DatasetManifest, split: str,
                        cfg: ModelConfig | None = None) -> EvalReport:
    ckpt = load_checkpoint(checkpoint)
    model_cfg = ckpt.model.config
    if model_cfg.class_count != manifest.class_count:
        raise ConfigError(
            f"checkpoint has {model_cfg.class_count} classes but manifest lists {manifest.class_count}"
        )
    if cfg is not None:
        model_cfg = model_cfg.replace(
            conf_thresh=cfg.conf_thresh, nms_iou=cfg.nms_iou, eval_conf_thresh=cfg.eval_conf_thresh,
            max_detections=cfg.max_detections,
        )
    report, _ = evaluate_model(ckpt.model, manifest, split, model_cfg)
    return report


@dataclass
class TrainResult:
    run_dir: Path
    last: Path
    best: Path
    rows: list[dict[str, float]] = field(default_factory=list)
    final_report: EvalReport | None = None
    state: TrainState | None = None


class Trainer:
    """Runs the epoch loop and writes the run directory.

    Layout: ``config.ini`` (effective config), ``run.log``, ``metrics.csv``,
    ``schedule.csv``, ``checkpoints/{last,best}.pt`` and, from the last
    validation pass, ``report.txt``, ``pr_curve.csv``, ``confusion_matrix.csv``.
    """

    def __init__(self, cfg: ModelConfig, manifest: DatasetManifest, run_dir: str | Path,
                 val_split: str = "val", max_steps: int | None = None, resume: str | Path | None = None,
                 eval_every: int = 1):
        if cfg.class_count != manifest.class_count:
            raise ConfigError(f"config has {cfg.class_count} classes but manifest lists {manifest.class_count}")
        self.cfg = cfg
        self.manifest = manifest
        self.run_dir = Path(run_dir)
        self.val_split = val_split if val_split in manifest.splits else None
        self.max_steps = max_steps
        self.eval_every = max(1, eval_every)
        self.train_data = DetectionDataset(manifest, "train", cfg.input_size)
        if len(self.train_data) == 0:
            raise TrainingError("training split is empty")
        self.val_data = DetectionDataset(manifest, self.val_split, cfg.input_size) if self.val_split else None
        self.steps_per_epoch = math.ceil(len(self.train_data) / cfg.batch_size)
        if resume is not None:
            ckpt = load_checkpoint(resume)
            if ckpt.model.config.class_count != cfg.class_count:
                raise ConfigError("resume checkpoint class count differs from config")
            self.model = ckpt.model
            self.state = ckpt.state
            self.optimizer = make_optimizer(self.model, cfg)
            if ckpt.optimizer_state is not None:
                self.optimizer.load_state_dict(ckpt.optimizer_state)
            if ckpt.torch_rng is not None:
                torch.set_rng_state(ckpt.torch_rng)
        else:
            torch.manual_seed(cfg.seed)
            self.model = build_model(cfg)
            self.state = TrainState(seed=cfg.seed)
            self.optimizer = make_optimizer(self.model, cfg)
        self.dtype = next(self.model.parameters()).dtype
        self.scales = grid_scales(cfg)

    @property
    def total_steps(self) -> int:
        return self.cfg.epochs * self.steps_per_epoch

    def _setup_run_dir(self, resumed: bool) -> None:
        (self.run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        (self.run_dir / "config.ini").write_text(self.cfg.to_ini(), encoding="utf-8")
        mode = "a" if resumed else "w"
        for name, cols in (("metrics.csv", METRIC_COLUMNS), ("schedule.csv", SCHEDULE_COLUMNS)):
            path = self.run_dir / name
            if mode == "w" or not path.exists():
                with open(path, "w", newline="", encoding="utf-8") as fh:
                    csv.writer(fh).writerow(cols)

    def _append(self, name: str, cols: Sequence[str], row: dict[str, Any]) -> None:
        with open(self.run_dir / name, "a", newline="", encoding="utf-8") as fh:
            csv.writer(fh).writerow([_fmt(row.get(c, "")) for c in cols])

    def train_step(self, images: torch.Tensor, targets) -> dict[str, float]:
        lr, momentum = lr_momentum_schedule(self.state.step, self.steps_per_epoch, self.cfg, self.total_steps)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
            group["momentum"] = momentum
        self.model.train()
        target_map = assign_batch(targets, self.scales, self.cfg.class_count, self.cfg.label_smoothing, self.dtype)
        main, aux = self.model(images.to(self.dtype))
        losses = total_loss(main, aux, target_map, self.cfg)
        self.optimizer.zero_grad(set_to_none=True)
        losses.total.backward()
        self.optimizer.step()
        row = losses.as_floats()
        row.update(lr=lr, momentum=momentum, collisions=target_map.collisions)
        self._append("schedule.csv", SCHEDULE_COLUMNS,
                     {"step": self.state.step, "epoch": self.state.epoch, "lr": lr, "momentum": momentum})
        self.state.step += 1
        return row

    def fit(self) -> TrainResult:
        resumed = self.state.step > 0
        self._setup_run_dir(resumed)
        handler = logging.FileHandler(self.run_dir / "run.log", mode="a" if resumed else "w", encoding="utf-8")
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
        log.addHandler(handler)
        log.setLevel(logging.INFO)
        try:
            return self._fit()
        finally:
            log.removeHandler(handler)
            handler.close()

    def _fit(self) -> TrainResult:
        cfg = self.cfg
        log.info(
            "recipe: epochs %d batch %d imgsz %d lr0 %g lr_final %g momentum %g weight_decay %g "
            "warmup_epochs %g warmup_momentum %g close_mosaic %d label_smoothing %g",
            cfg.epochs, cfg.batch_size, cfg.input_size, cfg.lr0, cfg.lr_final, cfg.momentum, cfg.weight_decay,
            cfg.warmup_epochs, cfg.warmup_momentum, cfg.close_mosaic, cfg.label_smoothing,
        )
        last = self.run_dir / "checkpoints" / "last.pt"
        best = self.run_dir / "checkpoints" / "best.pt"
        rows = []
        report = None
        stop = False
        while self.state.epoch < cfg.epochs and not stop:
            epoch = self.state.epoch
            t0 = time.time()
            sums: dict[str, float] = {}
            n = 0
            lr = momentum = 0.0
            for batch in build_pipeline(self.manifest, cfg, "train", epoch=epoch, dataset=self.train_data):
                step_row = self.train_step(batch.images, batch.targets)
                lr, momentum = step_row["lr"], step_row["momentum"]
                for k in ("box_loss", "cls_loss", "obj_loss", "dfl_loss", "aux_loss", "total_loss"):
                    sums[k] = sums.get(k, 0.0) + step_row[k]
                n += 1
                if self.max_steps is not None and self.state.step >= self.max_steps:
                    stop = True
                    break
            row: dict[str, Any] = {k: v / max(1, n) for k, v in sums.items()}
            row.update(epoch=epoch, lr=lr, momentum=momentum)
            is_last = stop or epoch == cfg.epochs - 1
            if self.val_data is not None and ((epoch + 1) % self.eval_every == 0 or is_last):
                report, val_losses = evaluate_model(self.model, self.manifest, self.val_split, cfg, self.val_data)
                row.update(val_mAP50=report.map50, val_mAP50_95=report.map50_95)
                row.update({f"val_{k}": v for k, v in val_losses.items() if k in ("box_loss", "cls_loss", "dfl_loss", "obj_loss")})
                improved = self.state.record(report.map50)
            else:
                improved = self.val_data is None and not best.exists()
            self.state.epoch = epoch + 1
            save_checkpoint(last, self.model, self.state, self.optimizer)
            if improved or not best.exists():
                save_checkpoint(best, self.model, self.state, self.optimizer)
            self._append("metrics.csv", METRIC_COLUMNS, row)
            rows.append(row)
            log.info("epoch %d: %s (%.1fs)", epoch, {k: round(v, 5) for k, v in row.items() if isinstance(v, float)}, time.time() - t0)
        if report is not None:
            report.save(self.run_dir)
        return TrainResult(self.run_dir, last, best, rows, report, self.state)


def train(cfg: ModelConfig, manifest: DatasetManifest, run_dir: str | Path, **kwargs: Any) -> TrainResult:
    return Trainer(cfg, manifest, run_dir, **kwargs).fit()


def _fmt(v: Any) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed)
