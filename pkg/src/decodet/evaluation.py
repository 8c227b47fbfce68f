"""Per-class average precision and mAP.

Protocol: detections of a class are ranked by score (stable); each one
greedily claims the still-unmatched ground truth of highest IoU, provided
that IoU reaches the threshold. AP is the all-points interpolated area under
the precision/recall curve. Classes without ground truth are left out of the
mean. There are no difficult/crowd flags.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import boxes_to_array, iou_matrix


@dataclass(frozen=True)
class EvalConfig:
    iou_thresh: float = 0.5
    classes: tuple[int, ...] | None = None

    def __post_init__(self):
        if not 0.0 < self.iou_thresh < 1.0:
            raise ValueError(f"iou_thresh must lie in (0, 1), got {self.iou_thresh}")


@dataclass
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    ap: float


@dataclass
class ClassReport:
    class_id: int
    ap: float
    num_gt: int
    num_det: int = 0


@dataclass
class EvalReport:
    map: float
    per_class: list[ClassReport] = field(default_factory=list)
    iou_thresh: float = 0.5

    def to_dict(self) -> dict:
        return {
            "map": self.map,
            "iou_thresh": self.iou_thresh,
            "per_class": [{"class": r.class_id, "ap": r.ap, "num_gt": r.num_gt, "num_det": r.num_det} for r in self.per_class],
        }


def match_detections(det_boxes, gt_boxes, iou_thresh: float = 0.5) -> np.ndarray:
    """TP flags for detections of one class in one image, given in ranked order."""
    det_boxes = boxes_to_array(det_boxes)
    gt_boxes = boxes_to_array(gt_boxes)
    flags = np.zeros(det_boxes.shape[0], dtype=bool)
    if det_boxes.shape[0] == 0 or gt_boxes.shape[0] == 0:
        return flags
    overlaps = iou_matrix(det_boxes, gt_boxes)
    free = np.ones(gt_boxes.shape[0], dtype=bool)
    for i in range(det_boxes.shape[0]):
        cand = np.where(free & (overlaps[i] >= iou_thresh), overlaps[i], -1.0)
        j = int(np.argmax(cand))
        if cand[j] >= 0:
            flags[i] = True
            free[j] = False
    return flags


def pr_curve(flags, num_gt: int) -> PRCurve:
    flags = np.asarray(flags, dtype=bool)
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / num_gt if num_gt > 0 else np.zeros(flags.shape[0])
    precision = tp / np.maximum(tp + fp, 1)
    return PRCurve(recall, precision, average_precision(flags, num_gt))


def average_precision(flags, num_gt: int) -> float:
    """All-points interpolated AP of a ranked TP/FP sequence.

    With no ground truth the AP is 1 for an empty detection list and 0
    otherwise.
    """
    flags = np.asarray(flags, dtype=bool)
    if num_gt < 0:
        raise ValueError("num_gt must be >= 0")
    if num_gt == 0:
        return 1.0 if flags.size == 0 else 0.0
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    recall = np.concatenate([[0.0], tp / num_gt, [1.0]])
    precision = np.concatenate([[0.0], tp / np.arange(1, flags.size + 1), [0.0]])
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.flatnonzero(recall[1:] != recall[:-1])
    return float(np.sum((recall[steps + 1] - recall[steps]) * precision[steps + 1]))


def class_ap(dets, gts, class_id: int, iou_thresh: float) -> ClassReport:
    """AP of one class over all images. ``dets``/``gts`` are Detection/GT-like records."""
    cdets = [d for d in dets if d.class_id == class_id]
    cgts = [g for g in gts if g.class_id == class_id]
    order = sorted(range(len(cdets)), key=lambda i: -cdets[i].score)
    gts_by_image = defaultdict(list)
    for g in cgts:
        gts_by_image[g.image].append(g.box.as_list())
    dets_by_image = defaultdict(list)
    for rank, i in enumerate(order):
        dets_by_image[cdets[i].image].append((rank, cdets[i].box.as_list()))
    flags = np.zeros(len(order), dtype=bool)
    for image, items in dets_by_image.items():
        ranks = [r for r, _ in items]
        flags[ranks] = match_detections([b for _, b in items], gts_by_image.get(image, []), iou_thresh)
    return ClassReport(class_id, average_precision(flags, len(cgts)), len(cgts), len(cdets))


def mean_ap(dets: Sequence, gts: Sequence, cfg: EvalConfig = EvalConfig()) -> EvalReport:
    """Unweighted mean of per-class AP over classes that have ground truth.

    Records need ``box``, ``class_id`` and ``image``; detections also ``score``.
    """
    classes = sorted({g.class_id for g in gts})
    if cfg.classes is not None:
        wanted = set(cfg.classes)
        classes = [c for c in classes if c in wanted]
    dets_by_class, gts_by_class = defaultdict(list), defaultdict(list)
    for d in dets:
        dets_by_class[d.class_id].append(d)
    for g in gts:
        gts_by_class[g.class_id].append(g)
    reports = [class_ap(dets_by_class[c], gts_by_class[c], c, cfg.iou_thresh) for c in classes]
    value = float(np.mean([r.ap for r in reports])) if reports else 0.0
    return EvalReport(value, reports, cfg.iou_thresh)
