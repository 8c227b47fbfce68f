"""Axis-aligned box arithmetic and class-agnostic box regression.

Boxes use continuous pixel coordinates; area is ``(x2 - x1) * (y2 - y1)`` with
no +1 correction. The vectorized helpers work on ``(N, 4)`` arrays in
``x1, y1, x2, y2`` order and are what the heads, NMS and evaluator call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

# exp() of a log-size delta is clamped here so absurd deltas stay finite
_MAX_LOG_RATIO = math.log(1e6)


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in coords):
            raise ValueError(f"non-finite box coordinates: {coords}")
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"box has x2 < x1 or y2 < y1: {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    def as_list(self) -> list[float]:
        return [float(self.x1), float(self.y1), float(self.x2), float(self.y2)]

    @classmethod
    def from_seq(cls, seq) -> "BBox":
        x1, y1, x2, y2 = (float(v) for v in seq)
        return cls(x1, y1, x2, y2)

    def shifted(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)

    def scaled(self, factor: float) -> "BBox":
        return BBox(self.x1 * factor, self.y1 * factor, self.x2 * factor, self.y2 * factor)


class RegressionDelta(NamedTuple):
    dx: float
    dy: float
    dw: float
    dh: float


@dataclass(frozen=True)
class ImageExtent:
    width: int
    height: int

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image extent must be positive, got {self.width}x{self.height}")


def area(b: BBox) -> float:
    return (b.x2 - b.x1) * (b.y2 - b.y1)


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = area(a) + area(b) - inter
    if union <= 0:
        return 0.0
    return inter / union


def encode(target: BBox, anchor: BBox) -> RegressionDelta:
    """Center-offset / log-size deltas of ``target`` relative to ``anchor``."""
    aw, ah = anchor.width, anchor.height
    if aw <= 0 or ah <= 0:
        raise ValueError(f"cannot encode against degenerate anchor {anchor}")
    tw, th = target.width, target.height
    if tw <= 0 or th <= 0:
        raise ValueError(f"cannot encode degenerate target {target}")
    acx, acy = anchor.x1 + 0.5 * aw, anchor.y1 + 0.5 * ah
    tcx, tcy = target.x1 + 0.5 * tw, target.y1 + 0.5 * th
    return RegressionDelta((tcx - acx) / aw, (tcy - acy) / ah, math.log(tw / aw), math.log(th / ah))


def decode(delta, anchor: BBox, clip: ImageExtent | None = None) -> BBox:
    """Apply ``delta`` to ``anchor``; clip to ``[0, width] x [0, height]`` if given."""
    dx, dy, dw, dh = (float(v) for v in delta)
    if not all(math.isfinite(v) for v in (dx, dy, dw, dh)):
        raise ValueError(f"non-finite regression delta {tuple(delta)}")
    aw, ah = anchor.width, anchor.height
    if aw <= 0 or ah <= 0:
        raise ValueError(f"cannot decode against degenerate anchor {anchor}")
    cx = anchor.x1 + 0.5 * aw + dx * aw
    cy = anchor.y1 + 0.5 * ah + dy * ah
    w = aw * math.exp(min(dw, _MAX_LOG_RATIO))
    h = ah * math.exp(min(dh, _MAX_LOG_RATIO))
    x1, y1, x2, y2 = cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h
    if clip is not None:
        x1, x2 = _clamp(x1, clip.width), _clamp(x2, clip.width)
        y1, y2 = _clamp(y1, clip.height), _clamp(y2, clip.height)
    return BBox(x1, y1, x2, y2)


def clip_box(b: BBox, extent: ImageExtent) -> BBox:
    return BBox(
        _clamp(b.x1, extent.width),
        _clamp(b.y1, extent.height),
        _clamp(b.x2, extent.width),
        _clamp(b.y2, extent.height),
    )


def _clamp(v: float, hi: float) -> float:
    return min(max(v, 0.0), float(hi))


# ---------------------------------------------------------------------------
# vectorized forms, (N, 4) float arrays

def boxes_to_array(boxes) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        arr = boxes.astype(np.float64, copy=False)
    else:
        arr = np.array([b.as_list() if isinstance(b, BBox) else list(b) for b in boxes], dtype=np.float64)
    return arr.reshape(-1, 4)


def box_areas(boxes: np.ndarray) -> np.ndarray:
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between rows of ``a`` (N, 4) and ``b`` (M, 4)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = box_areas(a)[:, None] + box_areas(b)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def encode_boxes(targets: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise ValueError("cannot encode against degenerate anchors")
    tw = targets[:, 2] - targets[:, 0]
    th = targets[:, 3] - targets[:, 1]
    dx = (targets[:, 0] + 0.5 * tw - anchors[:, 0] - 0.5 * aw) / aw
    dy = (targets[:, 1] + 0.5 * th - anchors[:, 1] - 0.5 * ah) / ah
    return np.stack([dx, dy, np.log(tw / aw), np.log(th / ah)], axis=1)


def decode_boxes(deltas: np.ndarray, anchors: np.ndarray, clip: ImageExtent | None = None) -> np.ndarray:
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    if not np.all(np.isfinite(deltas)):
        raise ValueError("non-finite regression deltas")
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise ValueError("cannot decode against degenerate anchors")
    cx = anchors[:, 0] + 0.5 * aw + deltas[:, 0] * aw
    cy = anchors[:, 1] + 0.5 * ah + deltas[:, 1] * ah
    w = aw * np.exp(np.minimum(deltas[:, 2], _MAX_LOG_RATIO))
    h = ah * np.exp(np.minimum(deltas[:, 3], _MAX_LOG_RATIO))
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)
    if clip is not None:
        np.clip(out[:, 0::2], 0.0, clip.width, out=out[:, 0::2])
        np.clip(out[:, 1::2], 0.0, clip.height, out=out[:, 1::2])
    return out
