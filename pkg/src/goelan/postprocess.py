"""Decode raw head outputs into detections, IoU and non-maximum suppression."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
from torch import Tensor

from goelan.structures import BBox, Detection, GroundTruthObject

DEFAULT_CONF_THRESH = 0.25
DEFAULT_NMS_IOU = 0.45


def activate_boxes(raw_box: Tensor) -> Tensor:
    """Map box logits ``(..., 4, H, W)`` to (x offset, y offset, w, h).

    Offsets are cell-relative in (0, 1); w and h are fractions of the input size.
    """
    s = torch.sigmoid(raw_box)
    return torch.cat([s[..., :2, :, :], s[..., 2:4, :, :] ** 2], dim=-3)


def encode_box(obj: GroundTruthObject, grid_w: int, grid_h: int | None = None) -> tuple[int, int, float, float, float, float]:
    """Cell (gx, gy) holding the object's center plus its cell-relative target (ox, oy, w, h)."""
    grid_h = grid_w if grid_h is None else grid_h
    gx = min(int(obj.cx * grid_w), grid_w - 1)
    gy = min(int(obj.cy * grid_h), grid_h - 1)
    return gx, gy, obj.cx * grid_w - gx, obj.cy * grid_h - gy, obj.w, obj.h


def decode_cell_box(gx: float, gy: float, ox: float, oy: float, w: float, h: float, stride: float, input_size: float) -> BBox:
    cx = (gx + ox) * stride
    cy = (gy + oy) * stride
    return BBox.from_center(cx, cy, w * input_size, h * input_size)


def decode(raw: Sequence[Tensor], conf_thresh: float = DEFAULT_CONF_THRESH, input_size: int | None = None,
           max_detections: int | None = None) -> list[list[Detection]]:
    """Turn per-scale raw predictions into per-image detection lists.

    score = sigmoid(objectness) * max softmax class probability. Boxes are in
    pixel corners clipped to the image; detections with score below
    ``conf_thresh`` are dropped.
    """
    if not 0.0 <= conf_thresh <= 1.0:
        raise ValueError(f"conf_thresh must lie in [0, 1], got {conf_thresh}")
    if not raw:
        return []
    batch = raw[0].shape[0]
    if input_size is None:
        input_size = raw[0].shape[-1] * 8
    per_image: list[list[Detection]] = [[] for _ in range(batch)]
    with torch.no_grad():
        all_boxes, all_scores, all_cls = [], [], []
        for p in raw:
            _, _, h, w = p.shape
            stride = input_size / h
            box = activate_boxes(p[:, :4]).double()
            obj = torch.sigmoid(p[:, 4].double())
            cls_prob = torch.softmax(p[:, 5:].double(), dim=1)
            best_p, best_c = cls_prob.max(1)
            score = obj * best_p
            gy, gx = torch.meshgrid(torch.arange(h, dtype=torch.float64), torch.arange(w, dtype=torch.float64), indexing="ij")
            cx = (gx + box[:, 0]) * stride
            cy = (gy + box[:, 1]) * stride
            bw = box[:, 2] * input_size
            bh = box[:, 3] * input_size
            corners = torch.stack([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2], -1).clamp(0, input_size)
            all_boxes.append(corners.reshape(batch, -1, 4))
            all_scores.append(score.reshape(batch, -1))
            all_cls.append(best_c.reshape(batch, -1))
        boxes = torch.cat(all_boxes, 1).cpu().numpy()
        scores = torch.cat(all_scores, 1).cpu().numpy()
        classes = torch.cat(all_cls, 1).cpu().numpy()
    for b in range(batch):
        idx = np.nonzero(scores[b] >= conf_thresh)[0]
        idx = idx[np.argsort(-scores[b][idx], kind="stable")]
        if max_detections is not None:
            idx = idx[:max_detections]
        per_image[b] = [
            Detection(BBox(*map(float, boxes[b, i])), int(classes[b, i]), float(scores[b, i])) for i in idx
        ]
    return per_image


def iou(a: BBox, b: BBox) -> float:
    iw = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    ih = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between corner boxes ``a`` (N, 4) and ``b`` (M, 4)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.maximum(0.0, np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]))
    ih = np.maximum(0.0, np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]))
    inter = iw * ih
    area_a = np.maximum(0.0, a[:, 2] - a[:, 0]) * np.maximum(0.0, a[:, 3] - a[:, 1])
    area_b = np.maximum(0.0, b[:, 2] - b[:, 0]) * np.maximum(0.0, b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0.0, inter / np.where(union > 0.0, union, 1.0), 0.0)
    return out


def sort_detections(dets: Sequence[Detection]) -> list[Detection]:
    """Deterministic order: score descending, then class ascending, then x1 ascending."""
    return sorted(dets, key=lambda d: (-d.score, d.class_id, d.box.x1))


def nms(dets: Sequence[Detection], iou_thresh: float = DEFAULT_NMS_IOU, class_aware: bool = True) -> list[Detection]:
    """Greedy NMS: keep a detection iff its IoU with every kept (same-class) detection is below ``iou_thresh``."""
    if not 0.0 < iou_thresh <= 1.0:
        raise ValueError(f"iou_thresh must lie in (0, 1], got {iou_thresh}")
    ordered = sort_detections(dets)
    if not ordered:
        return []
    boxes = np.array([d.box.as_tuple() for d in ordered], dtype=np.float64)
    classes = np.array([d.class_id for d in ordered])
    suppressed = np.zeros(len(ordered), dtype=bool)
    keep = []
    for i in range(len(ordered)):
        if suppressed[i]:
            continue
        keep.append(ordered[i])
        rest = slice(i + 1, None)
        overlap = iou_matrix(boxes[i], boxes[rest])[0] >= iou_thresh
        if class_aware:
            overlap &= classes[rest] == classes[i]
        suppressed[rest] |= overlap
    return keep


def postprocess(raw: Sequence[Tensor], input_size: int, conf_thresh: float = DEFAULT_CONF_THRESH,
                nms_iou: float = DEFAULT_NMS_IOU, max_detections: int = 300, class_aware: bool = True) -> list[list[Detection]]:
    """decode -> per-image NMS -> cap at ``max_detections``."""
    decoded = decode(raw, conf_thresh, input_size)
    return [nms(dets, nms_iou, class_aware)[:max_detections] for dets in decoded]
