"""RoI label assignment and the composite detection loss.

This is a diagnostic surface: it computes targets and loss values for given
predictions, it does not train anything.

Index conventions: super-classes are ``0..K-1`` and background is ``K``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Sequence

import numpy as np

from .geometry import BBox, RegressionDelta, boxes_to_array, encode_boxes, iou_matrix
from .taxonomy import Taxonomy

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class GroundTruth:
    box: BBox
    class_id: int
    image: int = 0

    def to_dict(self) -> dict:
        return {"image": self.image, "box": self.box.as_list(), "class": self.class_id}


@dataclass
class RoITarget:
    detection_label: int
    classification_label: int | None = None
    regression_target: RegressionDelta | None = None
    matched_gt: int | None = None
    max_iou: float = 0.0

    def to_dict(self) -> dict:
        return {
            "detection_label": self.detection_label,
            "classification_label": self.classification_label,
            "regression_target": None if self.regression_target is None else list(self.regression_target),
            "matched_gt": self.matched_gt,
            "max_iou": self.max_iou,
        }


@dataclass
class TargetSet:
    background: int
    targets: list[RoITarget] = field(default_factory=list)

    def __len__(self):
        return len(self.targets)

    def __getitem__(self, i) -> RoITarget:
        return self.targets[i]

    def positives(self) -> list[int]:
        return [i for i, t in enumerate(self.targets) if t.detection_label != self.background]

    def to_dict(self) -> dict:
        return {"background": self.background, "rois": [t.to_dict() for t in self.targets]}


@dataclass
class LossReport:
    detection_loss: float
    regression_loss: float
    classification_loss: float
    total: float
    selected_rois: list[int]
    w_cls: float = 0.05

    def to_dict(self) -> dict:
        return {
            "detection_loss": self.detection_loss,
            "regression_loss": self.regression_loss,
            "classification_loss": self.classification_loss,
            "w_cls": self.w_cls,
            "total": self.total,
            "selected_rois": list(self.selected_rois),
        }


def assign_detection_labels(
    rois,
    gts: Sequence[GroundTruth],
    taxonomy: Taxonomy,
    fg_thresh: float = 0.5,
    delta_std: Sequence[float] | None = None,
) -> TargetSet:
    """Label each RoI with the super-class of its highest-IoU ground truth.

    An RoI is positive when that IoU is strictly greater than ``fg_thresh``;
    positives also get the ground truth's fine-grained class and its
    regression target (optionally divided by ``delta_std``). Ties in IoU go to
    the lower ground-truth index.
    """
    for g in gts:
        if not 0 <= g.class_id < taxonomy.num_classes:
            raise ValueError(f"ground-truth class {g.class_id} outside taxonomy of {taxonomy.num_classes} classes")
    rois = boxes_to_array(rois)
    bg = taxonomy.num_superclasses
    out = TargetSet(background=bg)
    if rois.shape[0] == 0:
        return out
    if not gts:
        out.targets = [RoITarget(bg) for _ in range(rois.shape[0])]
        return out

    gt_boxes = boxes_to_array([g.box for g in gts])
    overlaps = iou_matrix(rois, gt_boxes)
    best = overlaps.argmax(axis=1)
    best_iou = overlaps[np.arange(rois.shape[0]), best]
    deltas = np.zeros((rois.shape[0], 4))
    pos = best_iou > fg_thresh
    if pos.any():
        deltas[pos] = encode_boxes(gt_boxes[best[pos]], rois[pos])
        if delta_std is not None:
            deltas[pos] /= np.asarray(delta_std, dtype=np.float64)
    for i in range(rois.shape[0]):
        if pos[i]:
            g = gts[int(best[i])]
            out.targets.append(
                RoITarget(
                    taxonomy.superclass_of(g.class_id),
                    g.class_id,
                    RegressionDelta(*(float(v) for v in deltas[i])),
                    int(best[i]),
                    float(best_iou[i]),
                )
            )
        else:
            out.targets.append(RoITarget(bg, max_iou=float(best_iou[i])))
    return out


class RpnLabel(IntEnum):
    IGNORE = -1
    NEGATIVE = 0
    POSITIVE = 1


def assign_rpn_labels(anchors, gt_boxes, pos_thresh: float = 0.7, neg_thresh: float = 0.3) -> np.ndarray:
    """Per-anchor :class:`RpnLabel` values.

    Positive if max IoU >= ``pos_thresh`` or the anchor attains some ground
    truth's best (non-zero) IoU, all tied anchors counting; negative if max IoU <=
    ``neg_thresh``; ignored otherwise. Positive wins over negative.
    """
    if not pos_thresh > neg_thresh:
        raise ValueError(f"pos_thresh {pos_thresh} must exceed neg_thresh {neg_thresh}")
    anchors = boxes_to_array(anchors)
    gt = boxes_to_array([g.box if isinstance(g, GroundTruth) else g for g in gt_boxes])
    labels = np.full(anchors.shape[0], int(RpnLabel.IGNORE), dtype=np.int64)
    if anchors.shape[0] == 0:
        return labels
    if gt.shape[0] == 0:
        labels[:] = RpnLabel.NEGATIVE
        return labels
    overlaps = iou_matrix(anchors, gt)
    max_iou = overlaps.max(axis=1)
    labels[max_iou <= neg_thresh] = RpnLabel.NEGATIVE
    labels[max_iou >= pos_thresh] = RpnLabel.POSITIVE
    gt_best = overlaps.max(axis=0)
    # a ground truth touching no anchor at all would otherwise tie every anchor at 0
    hit = gt_best > 0
    argmax_anchor = (overlaps[:, hit] == gt_best[None, hit]).any(axis=1)
    labels[argmax_anchor] = RpnLabel.POSITIVE
    return labels


def smooth_l1(x):
    """0.5 x^2 for |x| < 1, |x| - 0.5 otherwise; elementwise on arrays."""
    ax = np.abs(x)
    out = np.where(ax < 1.0, 0.5 * ax * ax, ax - 0.5)
    return float(out) if np.ndim(out) == 0 else out


def cross_entropy(probs, label: int) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= label < probs.shape[-1]:
        raise ValueError(f"label {label} out of range for {probs.shape[-1]} classes")
    return -math.log(max(float(probs[label]), PROB_FLOOR))


def ohem_select(per_roi_losses, batch_size: int) -> list[int]:
    """Indices of the ``batch_size`` largest losses, ties to the lower index, in ascending order."""
    if batch_size < 1:
        raise ValueError("OHEM batch size must be >= 1")
    losses = np.asarray(per_roi_losses, dtype=np.float64)
    order = np.lexsort((np.arange(losses.shape[0]), -losses))
    return sorted(int(i) for i in order[:batch_size])


def total_loss(predictions, targets: TargetSet, batch_size: int = 128, w_cls: float = 0.05) -> LossReport:
    """Composite loss over OHEM-selected RoIs.

    Per RoI, detection loss is the cross-entropy of ``superclass_probs``
    against its detection label and regression loss is the smooth-L1 sum over
    the four deltas (positives only). OHEM keeps the ``batch_size`` RoIs with
    the largest detection+regression loss; both terms are averaged over the
    selected set. Classification loss is the mean cross-entropy of
    ``class_probs`` over all positive RoIs. ``total = det + reg + w_cls * cls``.
    """
    predictions = list(predictions)
    if len(predictions) != len(targets):
        raise ValueError(f"{len(predictions)} predictions vs {len(targets)} targets")
    n = len(predictions)
    if n == 0:
        return LossReport(0.0, 0.0, 0.0, 0.0, [], w_cls)

    det = np.empty(n)
    reg = np.zeros(n)
    for i, (pred, tgt) in enumerate(zip(predictions, targets.targets)):
        det[i] = cross_entropy(pred.superclass_probs, tgt.detection_label)
        if tgt.regression_target is not None:
            diff = np.asarray(pred.deltas, dtype=np.float64) - np.asarray(tgt.regression_target)
            reg[i] = float(np.sum(smooth_l1(diff)))

    selected = ohem_select(det + reg, batch_size)
    det_loss = float(det[selected].mean())
    reg_loss = float(reg[selected].mean())

    pos = targets.positives()
    if pos:
        cls_loss = float(np.mean([cross_entropy(predictions[i].class_probs, targets[i].classification_label) for i in pos]))
    else:
        cls_loss = 0.0
    total = det_loss + reg_loss + w_cls * cls_loss
    return LossReport(det_loss, reg_loss, cls_loss, total, selected, w_cls)
