"""Greedy NMS (per-class, clustered, class-agnostic), multi-scale fusion, top-k.

All three NMS modes are the same grouped kernel: detections are bucketed once
by ``(image, group)`` with a single lexsort, so classes that produced no
detections cost nothing and singleton buckets are kept without entering the
greedy loop. Grouping is by class for per-class NMS, by NMS cluster for
clustered NMS, and by nothing for class-agnostic NMS.

Ordering is always ``(score desc, class asc, insertion order)``, both for the
greedy pass and for the returned list.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .geometry import BBox, box_areas, iou_matrix

DEFAULT_NMS_IOU = 0.3
# above this bucket size IoUs are computed row by row instead of as a full matrix
_MATRIX_LIMIT = 32


@dataclass(frozen=True)
class Detection:
    box: BBox
    class_id: int
    score: float
    image: int = 0

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score {self.score} outside [0, 1]")
        if self.class_id < 0:
            raise ValueError(f"negative class id {self.class_id}")

    def to_dict(self) -> dict:
        return {"image": self.image, "box": self.box.as_list(), "class": self.class_id, "score": float(self.score)}


@dataclass(frozen=True, eq=False)
class NmsClusters:
    """Total mapping ``class_id -> nms cluster id`` in ``[0, M)``."""

    mapping: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mapping, dtype=np.int64)
        if m.ndim != 1 or (m.size and m.min() < 0):
            raise ValueError("cluster mapping must be a 1-D array of non-negative ids")
        object.__setattr__(self, "mapping", m)

    @property
    def num_classes(self) -> int:
        return int(self.mapping.shape[0])

    @property
    def num_clusters(self) -> int:
        return int(self.mapping.max()) + 1 if self.mapping.size else 0

    @classmethod
    def blocks(cls, num_classes: int, num_clusters: int) -> "NmsClusters":
        """Contiguous class blocks: ``c -> c * M // C``."""
        if not 1 <= num_clusters <= num_classes:
            raise ValueError(f"need 1 <= M <= C, got M={num_clusters}, C={num_classes}")
        return cls(np.arange(num_classes, dtype=np.int64) * num_clusters // num_classes)

    @classmethod
    def singletons(cls, num_classes: int) -> "NmsClusters":
        return cls(np.arange(num_classes, dtype=np.int64))

    @classmethod
    def single(cls, num_classes: int) -> "NmsClusters":
        return cls(np.zeros(num_classes, dtype=np.int64))

    def lookup(self, classes: np.ndarray) -> np.ndarray:
        classes = np.asarray(classes, dtype=np.int64)
        bad = (classes < 0) | (classes >= self.num_classes)
        if bad.any():
            raise ValueError(f"class {int(classes[bad][0])} has no NMS cluster (mapping covers {self.num_classes} classes)")
        return self.mapping[classes]


def _greedy(boxes: np.ndarray, thresh: float) -> list[int]:
    """Greedy NMS over boxes already in priority order; returns kept positions."""
    n = boxes.shape[0]
    if n <= _MATRIX_LIMIT:
        over = iou_matrix(boxes, boxes) >= thresh
        suppressed = np.zeros(n, dtype=bool)
        keep = []
        for i in range(n):
            if suppressed[i]:
                continue
            keep.append(i)
            suppressed |= over[i]
        return keep
    areas = box_areas(boxes)
    alive = np.ones(n, dtype=bool)
    keep = []
    for i in range(n):
        if not alive[i]:
            continue
        keep.append(i)
        rest = boxes[i + 1 :]
        iw = np.minimum(boxes[i, 2], rest[:, 2]) - np.maximum(boxes[i, 0], rest[:, 0])
        ih = np.minimum(boxes[i, 3], rest[:, 3]) - np.maximum(boxes[i, 1], rest[:, 1])
        inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
        union = areas[i] + areas[i + 1 :] - inter
        ov = np.zeros_like(inter)
        np.divide(inter, union, out=ov, where=union > 0)
        alive[i + 1 :] &= ov < thresh
    return keep


def priority_order(scores: np.ndarray, classes: np.ndarray) -> np.ndarray:
    n = scores.shape[0]
    return np.lexsort((np.arange(n), classes, -scores))


def nms_indices(boxes, scores, classes, iou_thresh: float = DEFAULT_NMS_IOU, groups=None, images=None) -> np.ndarray:
    """Indices of kept detections, in priority order.

    ``groups`` (one id per detection) selects which detections may suppress
    each other; ``None`` means a single group. Different ``images`` never
    interact.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    classes = np.asarray(classes, dtype=np.int64)
    n = scores.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    groups = np.zeros(n, dtype=np.int64) if groups is None else np.asarray(groups, dtype=np.int64)
    images = np.zeros(n, dtype=np.int64) if images is None else np.asarray(images, dtype=np.int64)

    order = np.lexsort((np.arange(n), classes, -scores, groups, images))
    g_img, g_grp = images[order], groups[order]
    starts = np.flatnonzero(np.r_[True, (g_img[1:] != g_img[:-1]) | (g_grp[1:] != g_grp[:-1])])
    ends = np.r_[starts[1:], n]
    sizes = ends - starts

    kept = [order[starts[sizes == 1]]]
    sorted_boxes = boxes[order]
    for s, e in zip(starts[sizes > 1], ends[sizes > 1]):
        local = _greedy(sorted_boxes[s:e], iou_thresh)
        kept.append(order[s + np.asarray(local, dtype=np.int64)])
    kept = np.concatenate(kept)
    return kept[priority_order(scores[kept], classes[kept])]


def _unpack(dets: Sequence[Detection]):
    boxes = np.array([d.box.as_list() for d in dets], dtype=np.float64).reshape(-1, 4)
    scores = np.array([d.score for d in dets], dtype=np.float64)
    classes = np.array([d.class_id for d in dets], dtype=np.int64)
    images = np.array([d.image for d in dets], dtype=np.int64)
    return boxes, scores, classes, images


def nms(dets: Sequence[Detection], iou_thresh: float = DEFAULT_NMS_IOU, ignore_class: bool = False) -> list[Detection]:
    dets = list(dets)
    boxes, scores, classes, images = _unpack(dets)
    groups = None if ignore_class else classes
    return [dets[i] for i in nms_indices(boxes, scores, classes, iou_thresh, groups, images)]


def clustered_nms(dets: Sequence[Detection], clusters: NmsClusters, iou_thresh: float = DEFAULT_NMS_IOU) -> list[Detection]:
    """Class-agnostic NMS inside each NMS cluster, results unioned."""
    dets = list(dets)
    boxes, scores, classes, images = _unpack(dets)
    groups = clusters.lookup(classes)
    return [dets[i] for i in nms_indices(boxes, scores, classes, iou_thresh, groups, images)]


def multiscale_merge(*scale_dets: Iterable[Detection], iou_thresh: float = DEFAULT_NMS_IOU) -> list[Detection]:
    """Concatenate detections from several scales (same image frame) and run per-class NMS."""
    merged = [d for dets in scale_dets for d in dets]
    return nms(merged, iou_thresh)


def topk_filter(dets: Sequence[Detection], k: int, score_floor: float = 0.0) -> list[Detection]:
    if k < 0:
        raise ValueError("k must be >= 0")
    dets = list(dets)
    _, scores, classes, _ = _unpack(dets)
    ranked = [dets[i] for i in priority_order(scores, classes) if scores[i] >= score_floor]
    return ranked[:k]
