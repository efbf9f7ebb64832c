"""Detection evaluation: matching, AP / mAP, precision / recall / F1, confusion matrix."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from goelan.postprocess import iou_matrix, sort_detections
from goelan.structures import Detection, GroundTruthObject

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass
class MatchResult:
    """Greedy one-to-one matching of score-sorted detections to ground truth."""

    detections: list[Detection]
    matched_gt: list[int | None]
    gt_matched: list[bool]

    @property
    def tp_flags(self) -> list[bool]:
        return [m is not None for m in self.matched_gt]

    @property
    def tp(self) -> int:
        return sum(self.tp_flags)

    @property
    def fp(self) -> int:
        return len(self.detections) - self.tp

    @property
    def fn(self) -> int:
        return self.gt_matched.count(False)


def _gt_boxes(gts: Sequence[GroundTruthObject], image_size: float) -> np.ndarray:
    return np.array([g.to_bbox(image_size).as_tuple() for g in gts], dtype=np.float64).reshape(-1, 4)


def _det_boxes(dets: Sequence[Detection]) -> np.ndarray:
    return np.array([d.box.as_tuple() for d in dets], dtype=np.float64).reshape(-1, 4)


def _greedy(ious: np.ndarray, det_cls: Sequence[int], gt_cls: Sequence[int], iou_thresh: float,
            class_aware: bool = True, taken: np.ndarray | None = None, skip: Sequence[bool] | None = None) -> list[int | None]:
    taken = np.zeros(len(gt_cls), dtype=bool) if taken is None else taken
    gt_cls = np.asarray(gt_cls)
    matched: list[int | None] = []
    for i, c in enumerate(det_cls):
        if skip is not None and skip[i]:
            matched.append(None)
            continue
        cand = ~taken
        if class_aware:
            cand &= gt_cls == c
        if not cand.any():
            matched.append(None)
            continue
        scores = np.where(cand, ious[i], -1.0)
        j = int(np.argmax(scores))
        if scores[j] >= iou_thresh:
            taken[j] = True
            matched.append(j)
        else:
            matched.append(None)
    return matched


def match_detections(dets: Sequence[Detection], gts: Sequence[GroundTruthObject], iou_thresh: float = 0.5,
                     image_size: float = 1.0) -> MatchResult:
    """Match detections (sorted by descending score) to same-class ground truth.

    Each detection takes the unmatched same-class object with the highest IoU,
    provided that IoU reaches ``iou_thresh``. ``image_size`` scales the
    normalized ground-truth boxes into the detections' coordinate frame.
    """
    ordered = sort_detections(dets)
    ious = iou_matrix(_det_boxes(ordered), _gt_boxes(gts, image_size))
    matched = _greedy(ious, [d.class_id for d in ordered], [g.class_id for g in gts], iou_thresh)
    gt_matched = [False] * len(gts)
    for m in matched:
        if m is not None:
            gt_matched[m] = True
    return MatchResult(ordered, matched, gt_matched)


def pr_curve(scores: Sequence[float], tp_flags: Sequence[bool], num_gt: int) -> tuple[np.ndarray, np.ndarray]:
    """Recall and precision after each detection, in descending score order."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    tp = np.asarray(tp_flags, dtype=np.float64)[order]
    ctp = np.cumsum(tp)
    n = np.arange(1, len(tp) + 1)
    recall = ctp / num_gt if num_gt else np.zeros_like(ctp)
    precision = ctp / n
    return recall, precision


def average_precision(scores: Sequence[float], tp_flags: Sequence[bool], num_gt: int) -> float:
    """Area under the all-points interpolated PR curve (monotone precision envelope).

    Returns NaN when the class has no ground truth.
    """
    if num_gt <= 0:
        return math.nan
    if len(scores) == 0:
        return 0.0
    recall, precision = pr_curve(scores, tp_flags, num_gt)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


@dataclass
class EvalReport:
    class_count: int
    iou_thresholds: tuple[float, ...]
    ap: np.ndarray  # (C, T), NaN for classes without ground truth
    map50: float
    map50_95: float
    map95: float
    precision: float
    recall: float
    f1: float
    class_precision: np.ndarray
    class_recall: np.ndarray
    gt_counts: np.ndarray
    confusion: np.ndarray
    excluded_classes: list[int] = field(default_factory=list)
    pr_points: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    class_names: list[str] | None = None

    def map_at(self, iou_thresh: float) -> float:
        j = _threshold_index(self.iou_thresholds, iou_thresh)
        return _nanmean(self.ap[:, j])

    def summary(self) -> dict[str, float]:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "mAP50": self.map50,
            "mAP50_95": self.map50_95,
            "mAP95": self.map95,
        }

    def to_text(self) -> str:
        lines = [f"{k}: {v:.6f}" for k, v in self.summary().items()]
        lines.append("excluded_classes: " + ",".join(str(c) for c in self.excluded_classes))
        for c in range(self.class_count):
            name = self.class_names[c] if self.class_names else str(c)
            for t, v in zip(self.iou_thresholds, self.ap[c]):
                lines.append(f"AP{int(round(t * 100))}/{name}: {'nan' if math.isnan(v) else f'{v:.6f}'}")
        return "\n".join(lines) + "\n"

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(self.to_text(), encoding="utf-8")
        write_confusion_csv(self.confusion, out / "confusion_matrix.csv", self.class_names)
        with open(out / "pr_curve.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class", "recall", "precision"])
            for c, (rec, prec) in sorted(self.pr_points.items()):
                for r, p in zip(rec, prec):
                    writer.writerow([c, f"{r:.6f}", f"{p:.6f}"])


def _threshold_index(thresholds: Sequence[float], value: float) -> int:
    for j, t in enumerate(thresholds):
        if abs(t - value) < 1e-9:
            return j
    raise KeyError(f"IoU threshold {value} was not evaluated")


def _nanmean(values: np.ndarray) -> float:
    values = values[~np.isnan(values)]
    return float(values.mean()) if values.size else 0.0


def evaluate(dets_per_image: Sequence[Sequence[Detection]], gts_per_image: Sequence[Sequence[GroundTruthObject]],
             class_count: int, conf_thresh: float = 0.25, image_size: float = 1.0,
             iou_thresholds: Sequence[float] = IOU_THRESHOLDS, cm_iou: float = 0.5,
             class_names: list[str] | None = None) -> EvalReport:
    """Full metric suite over a dataset.

    AP per class uses every detection; precision, recall and F1 use detections
    scoring at least ``conf_thresh`` and IoU 0.5. Precision and recall are
    averaged over classes that have ground truth and F1 is their harmonic mean.
    """
    if len(dets_per_image) != len(gts_per_image):
        raise ValueError("detections and ground truth must cover the same images")
    if not gts_per_image:
        raise ValueError("cannot evaluate an empty dataset")
    thresholds = tuple(iou_thresholds)
    if 0.5 not in [round(t, 9) for t in thresholds]:
        thresholds = (0.5,) + thresholds
    scores: list[list[float]] = [[] for _ in range(class_count)]
    flags: list[list[list[bool]]] = [[[] for _ in thresholds] for _ in range(class_count)]
    gt_counts = np.zeros(class_count, dtype=np.int64)
    for dets, gts in zip(dets_per_image, gts_per_image):
        for g in gts:
            gt_counts[g.class_id] += 1
        ordered = sort_detections(dets)
        ious = iou_matrix(_det_boxes(ordered), _gt_boxes(gts, image_size))
        det_cls = [d.class_id for d in ordered]
        gt_cls = [g.class_id for g in gts]
        for d in ordered:
            scores[d.class_id].append(d.score)
        for j, t in enumerate(thresholds):
            matched = _greedy(ious, det_cls, gt_cls, t)
            for d, m in zip(ordered, matched):
                flags[d.class_id][j].append(m is not None)
    ap = np.full((class_count, len(thresholds)), np.nan)
    pr_points = {}
    j50 = _threshold_index(thresholds, 0.5)
    cls_p = np.full(class_count, np.nan)
    cls_r = np.full(class_count, np.nan)
    excluded = []
    for c in range(class_count):
        if gt_counts[c] == 0:
            excluded.append(c)
            continue
        for j in range(len(thresholds)):
            ap[c, j] = average_precision(scores[c], flags[c][j], int(gt_counts[c]))
        rec, prec = pr_curve(scores[c], flags[c][j50], int(gt_counts[c]))
        pr_points[c] = (rec, prec)
        s = np.asarray(scores[c])
        keep = s >= conf_thresh
        tp = int(np.sum(np.asarray(flags[c][j50], dtype=bool) & keep)) if s.size else 0
        n_det = int(keep.sum()) if s.size else 0
        cls_p[c] = tp / n_det if n_det else 0.0
        cls_r[c] = tp / gt_counts[c]
    precision = _nanmean(cls_p)
    recall = _nanmean(cls_r)
    f1 = f1_score(precision, recall)
    t_index = {round(t, 9): j for j, t in enumerate(thresholds)}
    range_cols = [t_index[round(t, 9)] for t in IOU_THRESHOLDS if round(t, 9) in t_index]
    present = gt_counts > 0
    map50_95 = _nanmean(ap[present][:, range_cols].mean(axis=1)) if range_cols else math.nan
    map95 = _nanmean(ap[:, t_index[0.95]]) if 0.95 in t_index else math.nan
    confusion = confusion_matrix(dets_per_image, gts_per_image, class_count, conf_thresh, cm_iou, image_size=image_size)
    return EvalReport(
        class_count=class_count,
        iou_thresholds=thresholds,
        ap=ap,
        map50=_nanmean(ap[:, j50]),
        map50_95=map50_95,
        map95=map95,
        precision=precision,
        recall=recall,
        f1=f1,
        class_precision=cls_p,
        class_recall=cls_r,
        gt_counts=gt_counts,
        confusion=confusion,
        excluded_classes=excluded,
        pr_points=pr_points,
        class_names=class_names,
    )


def f1_score(precision: float, recall: float) -> float:
    if precision + recall <= 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def confusion_matrix(dets_per_image: Sequence[Sequence[Detection]], gts_per_image: Sequence[Sequence[GroundTruthObject]],
                     class_count: int, conf_thresh: float = 0.25, iou_thresh: float = 0.5, normalize: bool = False,
                     image_size: float = 1.0) -> np.ndarray:
    """(C+1) x (C+1) matrix; rows are predicted class, columns true class, index C is background.

    Detections are first matched to same-class objects; leftovers are then
    matched across classes, which is where confusions are recorded. Unmatched
    objects land in the background row, unmatched detections in the background column.
    """
    bg = class_count
    cm = np.zeros((class_count + 1, class_count + 1), dtype=np.float64 if normalize else np.int64)
    for dets, gts in zip(dets_per_image, gts_per_image):
        ordered = sort_detections([d for d in dets if d.score >= conf_thresh])
        ious = iou_matrix(_det_boxes(ordered), _gt_boxes(gts, image_size))
        det_cls = [d.class_id for d in ordered]
        gt_cls = [g.class_id for g in gts]
        taken = np.zeros(len(gts), dtype=bool)
        first = _greedy(ious, det_cls, gt_cls, iou_thresh, taken=taken)
        second = _greedy(ious, det_cls, gt_cls, iou_thresh, class_aware=False, taken=taken,
                         skip=[m is not None for m in first])
        for d, m1, m2 in zip(ordered, first, second):
            m = m1 if m1 is not None else m2
            if m is None:
                cm[d.class_id, bg] += 1
            else:
                cm[d.class_id, gts[m].class_id] += 1
        for j, g in enumerate(gts):
            if not taken[j]:
                cm[bg, g.class_id] += 1
    if normalize:
        sums = cm.sum(axis=0, keepdims=True)
        cm = np.divide(cm, sums, out=np.zeros_like(cm), where=sums > 0)
    return cm


def write_confusion_csv(cm: np.ndarray, path: str | Path, class_names: list[str] | None = None) -> None:
    n = cm.shape[0] - 1
    names = list(class_names) if class_names else [str(i) for i in range(n)]
    names = names + ["background"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["predicted\\true"] + names)
        for i, row in enumerate(cm):
            writer.writerow([names[i]] + [f"{v:g}" for v in row])
