"""Target assignment and detection losses.

Classification uses a focal loss on label-smoothed softmax targets; box
regression is the grid-cell sum of squared errors on (x, y, sqrt(w), sqrt(h)).
Objectness is a binary cross-entropy over every cell and an optional
distribution focal loss (DFL) supervises discretized box coordinates.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor

from goelan.config import ModelConfig
from goelan.postprocess import activate_boxes, encode_box
from goelan.structures import GroundTruthObject

log = logging.getLogger(__name__)


class LossContractError(ValueError):
    """An input violated a loss precondition (e.g. negative predicted size)."""


class NonFiniteLossError(FloatingPointError):
    """A loss component became NaN or infinite; training must stop."""

    def __init__(self, component: str, value: float):
        super().__init__(f"non-finite {component} loss: {value}")
        self.component = component


@dataclass
class ScaleTargets:
    stride: int
    obj: Tensor  # (B, H, W) indicator
    box: Tensor  # (B, 4, H, W): x offset, y offset, w, h
    cls: Tensor  # (B, C, H, W) smoothed distribution


@dataclass
class TargetMap:
    scales: list[ScaleTargets]
    collisions: int = 0
    rejected: int = 0

    @property
    def num_positives(self) -> int:
        return int(sum(s.obj.sum().item() for s in self.scales))

    @staticmethod
    def stack(maps: Sequence["TargetMap"]) -> "TargetMap":
        scales = []
        for per_scale in zip(*(m.scales for m in maps)):
            scales.append(
                ScaleTargets(
                    per_scale[0].stride,
                    torch.cat([s.obj for s in per_scale]),
                    torch.cat([s.box for s in per_scale]),
                    torch.cat([s.cls for s in per_scale]),
                )
            )
        return TargetMap(scales, sum(m.collisions for m in maps), sum(m.rejected for m in maps))

    def to(self, dtype: torch.dtype) -> "TargetMap":
        scales = [ScaleTargets(s.stride, s.obj.to(dtype), s.box.to(dtype), s.cls.to(dtype)) for s in self.scales]
        return TargetMap(scales, self.collisions, self.rejected)


@dataclass
class LossBreakdown:
    box: Tensor
    cls: Tensor
    obj: Tensor
    dfl: Tensor
    aux: Tensor
    total: Tensor
    num_positives: int = 0
    collisions: int = 0
    aux_parts: dict[str, float] = field(default_factory=dict)

    def as_floats(self) -> dict[str, float]:
        return {
            "box_loss": float(self.box.detach()),
            "cls_loss": float(self.cls.detach()),
            "obj_loss": float(self.obj.detach()),
            "dfl_loss": float(self.dfl.detach()),
            "aux_loss": float(self.aux.detach()),
            "total_loss": float(self.total.detach()),
        }


def smooth_labels(class_index: int, num_classes: int, eps: float, dtype: torch.dtype = torch.float64) -> Tensor:
    """(1 - eps) * onehot + eps / C."""
    if not 0 <= class_index < num_classes:
        raise IndexError(f"class index {class_index} out of range for {num_classes} classes")
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"smoothing must lie in [0, 1), got {eps}")
    target = torch.full((num_classes,), eps / num_classes, dtype=dtype)
    target[class_index] += 1.0 - eps
    return target


def choose_scale(obj: GroundTruthObject, strides: Sequence[int], input_size: int) -> int:
    """Index of the largest stride s with max(w, h) * input_size >= 4 s, else the smallest stride."""
    size = max(obj.w, obj.h) * input_size
    order = sorted(range(len(strides)), key=lambda i: strides[i])
    chosen = order[0]
    for i in order:
        if size >= 4 * strides[i]:
            chosen = i
    return chosen


def assign_targets(gts: Sequence[GroundTruthObject], scales: Sequence[tuple[int, int, int]], class_count: int,
                   eps: float, dtype: torch.dtype = torch.float32) -> TargetMap:
    """Build per-scale targets for one image (batch dimension of 1).

    ``scales`` lists ``(stride, H, W)``. Each object is placed in the cell
    holding its center at the scale chosen by :func:`choose_scale`. When two
    objects land in the same cell the later one wins and the collision is counted.
    """
    out = [
        ScaleTargets(
            s,
            torch.zeros(1, h, w, dtype=dtype),
            torch.zeros(1, 4, h, w, dtype=dtype),
            torch.zeros(1, class_count, h, w, dtype=dtype),
        )
        for s, h, w in scales
    ]
    strides = [s for s, _, _ in scales]
    input_size = scales[0][0] * scales[0][1]
    collisions = rejected = 0
    for obj in gts:
        if obj.w <= 0 or obj.h <= 0:
            warnings.warn(f"skipping degenerate object {obj}", stacklevel=2)
            rejected += 1
            continue
        if not 0 <= obj.class_id < class_count:
            raise IndexError(f"class id {obj.class_id} out of range for {class_count} classes")
        k = choose_scale(obj, strides, input_size)
        st = out[k]
        grid_h, grid_w = st.obj.shape[1:]
        gx, gy, ox, oy, w, h = encode_box(obj, grid_w, grid_h)
        if st.obj[0, gy, gx] > 0:
            collisions += 1
        st.obj[0, gy, gx] = 1.0
        st.box[0, :, gy, gx] = torch.tensor([ox, oy, w, h], dtype=dtype)
        st.cls[0, :, gy, gx] = smooth_labels(obj.class_id, class_count, eps, dtype)
    if collisions:
        log.debug("target assignment: %d cell collisions", collisions)
    return TargetMap(out, collisions, rejected)


def assign_batch(batch_gts: Sequence[Sequence[GroundTruthObject]], scales: Sequence[tuple[int, int, int]],
                 class_count: int, eps: float, dtype: torch.dtype = torch.float32) -> TargetMap:
    return TargetMap.stack([assign_targets(g, scales, class_count, eps, dtype) for g in batch_gts])


def focal_class_loss(logits: Tensor, targets: Tensor, alpha: float = 0.25, gamma: float = 2.0) -> tuple[Tensor, bool]:
    """Mean of -alpha * (1 - p_t)**gamma * log(p_t) over rows.

    ``logits`` and ``targets`` are (N, C); p_t is the softmax probability mass
    the prediction puts on the (possibly smoothed) target distribution. Returns
    the loss and whether there was at least one row.
    """
    if logits.shape[0] == 0:
        return logits.sum() * 0.0, False
    log_p = F.log_softmax(logits, dim=1)
    log_pt = torch.logsumexp(log_p + torch.log(targets), dim=1)
    pt = log_pt.exp()
    loss = -alpha * (1.0 - pt).clamp_min(0.0) ** gamma * log_pt
    return loss.mean(), True


def box_loss(pred: Tensor, target: Tensor, lambda_coord: float = 5.0) -> Tensor:
    """lambda * sum[(x - x^)^2 + (y - y^)^2 + (sqrt w - sqrt w^)^2 + (sqrt h - sqrt h^)^2].

    Rows are the indicator-selected (positive) cells, columns (x, y, w, h).
    """
    if pred.shape[0] == 0:
        return pred.sum() * 0.0
    if (pred[:, 2:] < 0).any():
        raise LossContractError("predicted width/height must be non-negative")
    xy = ((pred[:, :2] - target[:, :2]) ** 2).sum()
    wh = ((pred[:, 2:].sqrt() - target[:, 2:].sqrt()) ** 2).sum()
    return lambda_coord * (xy + wh)


def objectness_loss(logits: Tensor, indicator: Tensor, noobj_weight: float = 0.5) -> Tensor:
    """Summed BCE over all cells; negatives are down-weighted by ``noobj_weight``."""
    bce = F.binary_cross_entropy_with_logits(logits, indicator, reduction="none")
    weight = indicator + noobj_weight * (1.0 - indicator)
    return (bce * weight).sum()


def dfl_targets(box_target: Tensor) -> Tensor:
    """Coordinates supervised by DFL: (x offset, y offset, sqrt w, sqrt h), all in [0, 1]."""
    return torch.cat([box_target[:, :2], box_target[:, 2:].sqrt()], 1)


def dfl_loss(dist_logits: Tensor, values: Tensor) -> Tensor:
    """Distribution focal loss summed over rows, averaged over the 4 sides.

    ``dist_logits`` is (N, 4, bins) over the uniform grid [0, 1]; ``values`` (N, 4).
    """
    if dist_logits.shape[0] == 0:
        return dist_logits.sum() * 0.0
    bins = dist_logits.shape[-1]
    t = values.clamp(0.0, 1.0) * (bins - 1)
    left = t.floor().long().clamp(max=bins - 2)
    w_right = t - left.to(t.dtype)
    w_left = 1.0 - w_right
    log_p = F.log_softmax(dist_logits, dim=-1)
    lp_left = log_p.gather(-1, left.unsqueeze(-1)).squeeze(-1)
    lp_right = log_p.gather(-1, (left + 1).unsqueeze(-1)).squeeze(-1)
    return -(w_left * lp_left + w_right * lp_right).mean(1).sum()


def _positives(pred: Tensor, indicator: Tensor) -> Tensor:
    """Rows of ``pred`` (B, K, H, W) at cells where ``indicator`` (B, H, W) is set."""
    return pred.permute(0, 2, 3, 1)[indicator > 0]


def prediction_losses(raw: Sequence[Tensor], targets: TargetMap, cfg: ModelConfig) -> dict[str, Tensor]:
    """Unweighted box/cls/obj/dfl components for one set of head outputs."""
    if len(raw) != len(targets.scales):
        raise ValueError(f"{len(raw)} prediction scales vs {len(targets.scales)} target scales")
    batch = raw[0].shape[0]
    c = cfg.class_count
    box_rows, box_tgts, cls_rows, cls_tgts, dfl_rows = [], [], [], [], []
    obj = raw[0].new_zeros(())
    for p, t in zip(raw, targets.scales):
        if p.shape[2:] != t.obj.shape[1:]:
            raise ValueError(f"prediction grid {tuple(p.shape[2:])} vs target grid {tuple(t.obj.shape[1:])}")
        obj = obj + objectness_loss(p[:, 4], t.obj, cfg.noobj_weight)
        rows = _positives(p, t.obj)
        box_rows.append(rows[:, :4])
        cls_rows.append(rows[:, 5:5 + c])
        dfl_rows.append(rows[:, 5 + c:])
        box_tgts.append(_positives(t.box, t.obj))
        cls_tgts.append(_positives(t.cls, t.obj))
    box_raw = torch.cat(box_rows)
    box_tgt = torch.cat(box_tgts)
    pred_boxes = activate_boxes(box_raw[:, :, None, None])[:, :, 0, 0]
    box = box_loss(pred_boxes, box_tgt, cfg.lambda_coord) / batch
    cls, _ = focal_class_loss(torch.cat(cls_rows), torch.cat(cls_tgts), cfg.focal_alpha, cfg.focal_gamma)
    if cfg.dfl_enabled:
        dist = torch.cat(dfl_rows).reshape(-1, 4, cfg.dfl_bins)
        dfl = dfl_loss(dist, dfl_targets(box_tgt)) / batch
    else:
        dfl = obj.new_zeros(())
    return {"box": box, "cls": cls, "obj": obj / batch, "dfl": dfl}


def weighted_sum(parts: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    total = cfg.box_weight * parts["box"] + cfg.cls_weight * parts["cls"] + cfg.obj_weight * parts["obj"]
    if cfg.dfl_enabled:
        total = total + cfg.dfl_weight * parts["dfl"]
    return total


def total_loss(main: Sequence[Tensor], aux: Sequence[Tensor], targets: TargetMap, cfg: ModelConfig) -> LossBreakdown:
    """Weighted main-branch loss plus ``aux_weight`` times the same recipe on auxiliary outputs."""
    parts = prediction_losses(main, targets, cfg)
    total = weighted_sum(parts, cfg)
    aux_parts: dict[str, float] = {}
    if aux:
        aux_components = prediction_losses(aux, targets, cfg)
        aux_value = cfg.aux_weight * weighted_sum(aux_components, cfg)
        aux_parts = {k: float(v.detach()) for k, v in aux_components.items()}
    else:
        aux_value = total.new_zeros(())
    total = total + aux_value
    breakdown = LossBreakdown(
        parts["box"], parts["cls"], parts["obj"], parts["dfl"], aux_value, total,
        num_positives=targets.num_positives, collisions=targets.collisions, aux_parts=aux_parts,
    )
    check_finite(breakdown)
    return breakdown


def check_finite(b: LossBreakdown) -> None:
    for name in ("box", "cls", "obj", "dfl", "aux", "total"):
        value = float(getattr(b, name).detach())
        if not math.isfinite(value):
            raise NonFiniteLossError(name, value)
