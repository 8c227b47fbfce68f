"""Decoupled RoI head.

Two branches read pre-computed score maps:

* a position-sensitive branch with ``(K + 1) * P * P`` detection channels
  (K super-classes plus background) and ``4 * P * P`` class-agnostic
  regression channels;
* a fine-grained branch with ``C`` channels that is plainly average pooled
  inside the RoI.

The final score of class ``c`` is ``p_super[sc(c)] * p_class[c]``.

Pooling is continuous (no coordinate rounding). Every P x P bin is sampled at
a 2 x 2 grid of bilinear points placed at the bin quarter positions. Feature
cell ``(y, x)`` is centred at ``((x + 0.5) * stride, (y + 0.5) * stride)`` in
image pixels, and neighbours outside the map read zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import sparse

from .geometry import BBox, ImageExtent, RegressionDelta, boxes_to_array, decode, decode_boxes
from .taxonomy import Taxonomy

SAMPLES_PER_AXIS = 2
# chunk the sparse weight construction so temporaries stay bounded
_ROI_CHUNK = 512


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Channel-major ``(Ch, H, W)`` score map with ``stride`` image pixels per cell."""

    data: np.ndarray
    stride: float = 16.0

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"feature map must be (Ch, H, W) with all dims >= 1, got {data.shape}")
        if not self.stride > 0:
            raise ValueError(f"stride must be positive, got {self.stride}")
        if not np.all(np.isfinite(data)):
            raise ValueError("feature map contains non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def extent(self) -> ImageExtent:
        return ImageExtent(int(round(self.width * self.stride)), int(round(self.height * self.stride)))

    @cached_property
    def _columns(self) -> np.ndarray:
        # (H*W, Ch): every pooling reduces to sparse weights @ this matrix
        return np.ascontiguousarray(self.data.reshape(self.channels, -1).T, dtype=np.float64)

    def _bank_columns(self, bins: int) -> np.ndarray:
        """``(bins*H*W, G)`` view of a ``G*bins``-channel map, bin-major rows."""
        g = self.channels // bins
        hw = self.height * self.width
        return self._columns.reshape(hw, g, bins).transpose(2, 0, 1).reshape(bins * hw, g)


@dataclass(frozen=True)
class HeadConfig:
    num_superclasses: int
    num_classes: int
    grid: int
    taxonomy: Taxonomy

    def __post_init__(self):
        if self.grid < 1:
            raise ValueError("grid size P must be >= 1")
        if self.taxonomy.num_superclasses != self.num_superclasses:
            raise ValueError(f"taxonomy has K={self.taxonomy.num_superclasses}, config says {self.num_superclasses}")
        if self.taxonomy.num_classes != self.num_classes:
            raise ValueError(f"taxonomy has C={self.taxonomy.num_classes}, config says {self.num_classes}")

    @property
    def detection_channels(self) -> int:
        return (self.num_superclasses + 1) * self.grid * self.grid

    @property
    def regression_channels(self) -> int:
        return 4 * self.grid * self.grid

    def check_maps(self, detection_map: FeatureMap, regression_map: FeatureMap, class_map: FeatureMap):
        for name, fmap, want in (
            ("detection map", detection_map, self.detection_channels),
            ("regression map", regression_map, self.regression_channels),
            ("classification map", class_map, self.num_classes),
        ):
            if fmap.channels != want:
                raise ValueError(f"{name} has {fmap.channels} channels, expected {want}")


@dataclass
class RoIScores:
    superclass_probs: np.ndarray
    class_probs: np.ndarray
    deltas: RegressionDelta
    final_scores: np.ndarray
    box: BBox
    degenerate: bool = False


@dataclass
class BatchScores:
    """Per-RoI head outputs for N RoIs, stacked."""

    superclass_probs: np.ndarray  # (N, K+1)
    class_probs: np.ndarray  # (N, C)
    deltas: np.ndarray  # (N, 4)
    final_scores: np.ndarray  # (N, C)
    boxes: np.ndarray  # (N, 4) regressed, clipped
    degenerate: np.ndarray  # (N,) bool

    def __len__(self):
        return self.final_scores.shape[0]

    def roi(self, i: int) -> RoIScores:
        return RoIScores(
            self.superclass_probs[i],
            self.class_probs[i],
            RegressionDelta(*(float(v) for v in self.deltas[i])),
            self.final_scores[i],
            BBox.from_seq(self.boxes[i]),
            bool(self.degenerate[i]),
        )


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def degenerate_mask(rois: np.ndarray) -> np.ndarray:
    return (rois[:, 2] <= rois[:, 0]) | (rois[:, 3] <= rois[:, 1])


def _axis_terms(lo: np.ndarray, hi: np.ndarray, bins: int, size: int):
    """Neighbour indices/weights along one axis: shapes ``(N, bins, 2*SAMPLES_PER_AXIS)``."""
    step = (hi - lo) / bins
    offsets = np.arange(bins)[:, None] + (np.arange(SAMPLES_PER_AXIS) + 0.5) / SAMPLES_PER_AXIS
    pos = lo[:, None, None] + offsets[None] * step[:, None, None] - 0.5
    base = np.floor(pos)
    frac = pos - base
    idx = np.stack([base, base + 1], axis=-1).astype(np.int64)
    w = np.stack([1.0 - frac, frac], axis=-1)
    valid = (idx >= 0) & (idx < size)
    w = np.where(valid, w, 0.0)
    idx = np.clip(idx, 0, size - 1)
    n = lo.shape[0]
    return idx.reshape(n, bins, -1), w.reshape(n, bins, -1)


def _pool_weights(rois: np.ndarray, fmap: FeatureMap, bins: int, per_bin: bool) -> sparse.csr_matrix:
    """Sparse sampling weights for each RoI.

    With ``per_bin`` the columns are ``bin * H * W + cell`` and each bin's
    weights sum to at most 1/P^2 (so the row pools the P^2 bins' means);
    otherwise columns are plain cells and the whole RoI is averaged.
    """
    n = rois.shape[0]
    h, w = fmap.height, fmap.width
    hw = h * w
    ncols = bins * bins * hw if per_bin else hw
    if n == 0:
        return sparse.csr_matrix((0, ncols))
    feat = rois / fmap.stride
    yi, yw = _axis_terms(feat[:, 1], feat[:, 3], bins, h)
    xi, xw = _axis_terms(feat[:, 0], feat[:, 2], bins, w)
    terms = yi.shape[-1] * xi.shape[-1]
    # (N, Pi, Pj, ty, tx)
    cells = yi[:, :, None, :, None] * w + xi[:, None, :, None, :]
    weights = yw[:, :, None, :, None] * xw[:, None, :, None, :]
    weights = weights / (SAMPLES_PER_AXIS * SAMPLES_PER_AXIS * bins * bins)
    weights[degenerate_mask(rois)] = 0.0
    if per_bin:
        bin_ids = np.arange(bins * bins).reshape(1, bins, bins, 1, 1)
        cells = cells + bin_ids * hw
    rows = np.broadcast_to(np.arange(n)[:, None], (n, bins * bins * terms))
    mat = sparse.coo_matrix(
        (weights.reshape(n, -1).ravel(), (rows.ravel(), cells.reshape(n, -1).ravel())),
        shape=(n, ncols),
    )
    return mat.tocsr()


def _chunked(fn, rois: np.ndarray, width: int) -> np.ndarray:
    if rois.shape[0] <= _ROI_CHUNK:
        return fn(rois)
    out = np.empty((rois.shape[0], width))
    for start in range(0, rois.shape[0], _ROI_CHUNK):
        out[start : start + _ROI_CHUNK] = fn(rois[start : start + _ROI_CHUNK])
    return out


def psroi_pool_batch(fmap: FeatureMap, rois, grid: int, groups: int) -> np.ndarray:
    """Position-sensitive pooling of N RoIs into ``(N, groups)``.

    Bin ``(i, j)`` of group ``g`` reads channel ``g*P*P + i*P + j``; the group
    output is the mean of its P*P bin values. Zero-area RoIs pool to zeros.
    """
    if fmap.channels != groups * grid * grid:
        raise ValueError(f"map has {fmap.channels} channels, expected G*P*P = {groups}*{grid}*{grid}")
    rois = boxes_to_array(rois)
    cols = fmap._bank_columns(grid * grid)

    def run(chunk):
        return np.asarray(_pool_weights(chunk, fmap, grid, per_bin=True) @ cols)

    return _chunked(run, rois, groups)


def psroi_pool(fmap: FeatureMap, roi: BBox, grid: int, groups: int) -> np.ndarray:
    return psroi_pool_batch(fmap, [roi], grid, groups)[0]


def average_pool_batch(fmap: FeatureMap, rois, grid: int = 7) -> np.ndarray:
    """Per-channel RoI average over the same ``grid x grid`` bilinear sample layout."""
    rois = boxes_to_array(rois)
    cols = fmap._columns

    def run(chunk):
        return np.asarray(_pool_weights(chunk, fmap, grid, per_bin=False) @ cols)

    return _chunked(run, rois, fmap.channels)


def superclass_probabilities(pooled) -> np.ndarray:
    """Softmax over all K+1 entries, background included."""
    return softmax(pooled)


def classify_rois(class_map: FeatureMap, rois, num_classes: int | None = None, grid: int = 7) -> np.ndarray:
    if num_classes is not None and class_map.channels != num_classes:
        raise ValueError(f"classification map has {class_map.channels} channels, expected C={num_classes}")
    return softmax(average_pool_batch(class_map, rois, grid), axis=1)


def classify_roi(class_map: FeatureMap, roi: BBox, num_classes: int | None = None, grid: int = 7) -> np.ndarray:
    """C-way class distribution of one RoI; zero-area RoIs come out uniform."""
    return classify_rois(class_map, [roi], num_classes, grid)[0]


def combine_scores(superclass_probs, class_probs, taxonomy: Taxonomy) -> np.ndarray:
    """``final[..., c] = superclass_probs[..., sc(c)] * class_probs[..., c]``.

    Works on single vectors or on ``(N, .)`` batches. The background column
    (index K) is never read.
    """
    sp = np.asarray(superclass_probs, dtype=np.float64)
    cp = np.asarray(class_probs, dtype=np.float64)
    if sp.shape[-1] != taxonomy.num_superclasses + 1:
        raise ValueError(f"expected {taxonomy.num_superclasses + 1} super-class probabilities, got {sp.shape[-1]}")
    if cp.shape[-1] != taxonomy.num_classes:
        raise ValueError(f"expected {taxonomy.num_classes} class probabilities, got {cp.shape[-1]}")
    return sp[..., taxonomy.assignment] * cp


def score_rois(
    detection_map: FeatureMap,
    regression_map: FeatureMap,
    class_map: FeatureMap,
    rois,
    cfg: HeadConfig,
    extent: ImageExtent | None = None,
) -> BatchScores:
    cfg.check_maps(detection_map, regression_map, class_map)
    rois = boxes_to_array(rois)
    extent = extent or detection_map.extent
    p = cfg.grid
    sp = softmax(psroi_pool_batch(detection_map, rois, p, cfg.num_superclasses + 1), axis=1)
    deltas = psroi_pool_batch(regression_map, rois, p, 4)
    cp = classify_rois(class_map, rois, cfg.num_classes, grid=p)
    final = combine_scores(sp, cp, cfg.taxonomy)
    degenerate = degenerate_mask(rois)
    boxes = rois.copy()
    ok = ~degenerate
    if ok.any():
        boxes[ok] = decode_boxes(deltas[ok], rois[ok], extent)
    return BatchScores(sp, cp, deltas, final, boxes, degenerate)


def score_roi(detection_map, regression_map, class_map, roi: BBox, cfg: HeadConfig, extent=None) -> RoIScores:
    return score_rois(detection_map, regression_map, class_map, [roi], cfg, extent).roi(0)


def rpn_objectness_mode(rpn_score: float, class_probs, use_bbr: bool, deltas, anchor: BBox, clip=None):
    """Score with an external RPN objectness instead of the detection bank.

    Returns ``(rpn_score * class_probs, box)`` where ``box`` is the anchor,
    or the anchor refined by ``deltas`` when ``use_bbr`` is set.
    """
    if not 0.0 <= rpn_score <= 1.0:
        raise ValueError(f"rpn score must lie in [0, 1], got {rpn_score}")
    scores = float(rpn_score) * np.asarray(class_probs, dtype=np.float64)
    box = decode(deltas, anchor, clip) if use_bbr else anchor
    return scores, box
