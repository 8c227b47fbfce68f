"""End-to-end orchestration behind the CLI commands."""

from __future__ import annotations

import csv
import io
import logging
import statistics
import time
from dataclasses import dataclass

import numpy as np

from .config import PipelineConfig
from .evaluation import EvalConfig, EvalReport, mean_ap
from .geometry import BBox, ImageExtent, boxes_to_array
from .heads import BatchScores, FeatureMap, HeadConfig, score_rois
from .postprocess import Detection, NmsClusters, nms_indices, priority_order
from .targets import GroundTruth, LossReport, TargetSet, assign_detection_labels, total_loss
from .taxonomy import ClassRepresentation, Taxonomy, build_taxonomy

log = logging.getLogger(__name__)


def nms_groups(cfg: PipelineConfig, classes: np.ndarray, clusters: NmsClusters | None = None):
    if cfg.nms_mode == "per-class":
        return classes
    if cfg.nms_mode == "agnostic":
        return None
    clusters = clusters or NmsClusters.blocks(cfg.num_classes, cfg.nms_clusters)
    return clusters.lookup(classes)


@dataclass
class ScaleResult:
    boxes: np.ndarray
    scores: np.ndarray
    classes: np.ndarray


def candidates(scores: BatchScores, floor: float, scale: float = 1.0) -> ScaleResult:
    """Expand (RoI, class) pairs scoring at least ``floor`` into flat detection arrays."""
    rows, cols = np.nonzero(scores.final_scores >= floor)
    keep = ~scores.degenerate[rows]
    rows, cols = rows[keep], cols[keep]
    return ScaleResult(scores.boxes[rows] / scale, scores.final_scores[rows, cols], cols.astype(np.int64))


def detect_image(
    cfg: PipelineConfig,
    taxonomy: Taxonomy,
    proposals,
    per_scale,
    image: int = 0,
    clusters: NmsClusters | None = None,
) -> list[Detection]:
    """Score, regress, threshold, NMS, fuse scales and truncate for one image.

    ``per_scale`` holds ``(scale, detection, regression, classification)``
    tuples with channel-major map arrays. Proposals are in base-image pixels.
    """
    head = HeadConfig(cfg.num_superclasses, cfg.num_classes, cfg.grid, taxonomy)
    rois = boxes_to_array(proposals)[: cfg.roi_budget]
    results = []
    for scale, det, reg, cls in per_scale:
        maps = [FeatureMap(np.asarray(m), cfg.feature_stride) for m in (det, reg, cls)]
        extent = ImageExtent(round(cfg.image_width * scale), round(cfg.image_height * scale))
        scored = score_rois(*maps, rois * scale, head, extent)
        found = candidates(scored, cfg.score_floor, scale)
        groups = nms_groups(cfg, found.classes, clusters)
        keep = nms_indices(found.boxes, found.scores, found.classes, cfg.nms_iou, groups)
        results.append(ScaleResult(found.boxes[keep], found.scores[keep], found.classes[keep]))

    boxes = np.concatenate([r.boxes for r in results])
    scores = np.concatenate([r.scores for r in results])
    classes = np.concatenate([r.classes for r in results])
    if len(results) > 1:
        keep = nms_indices(boxes, scores, classes, cfg.nms_iou, classes)
    else:
        keep = priority_order(scores, classes)
    keep = keep[: cfg.top_k]
    return [Detection(BBox.from_seq(boxes[i]), int(classes[i]), float(scores[i]), image) for i in keep]


def run_detect(cfg: PipelineConfig, images, taxonomy: Taxonomy, clusters: NmsClusters | None = None) -> list[Detection]:
    """Detect over an iterable of ``(image_id, proposals, per_scale)``."""
    out = []
    for image, proposals, per_scale in images:
        t0 = time.perf_counter()
        out.extend(detect_image(cfg, taxonomy, proposals, per_scale, image, clusters))
        log.debug("image %d: %.2f ms", image, 1e3 * (time.perf_counter() - t0))
    return out


def run_cluster(features, k: int, seed: int = 0, max_iters: int = 100) -> Taxonomy:
    """Build a taxonomy from a ``C x D`` matrix of class representations."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ValueError(f"class features must be a C x D matrix, got shape {features.shape}")
    reps = [ClassRepresentation(i, row) for i, row in enumerate(features)]
    return build_taxonomy(reps, k, seed=seed, max_iters=max_iters)


def run_eval(dets, gts, iou_thresh: float = 0.5) -> EvalReport:
    return mean_ap(dets, gts, EvalConfig(iou_thresh))


def loss_check(cfg: PipelineConfig, taxonomy: Taxonomy, proposals, per_scale, gts) -> tuple[TargetSet, LossReport]:
    """Targets and loss of the base-scale head outputs on one image's proposals."""
    head = HeadConfig(cfg.num_superclasses, cfg.num_classes, cfg.grid, taxonomy)
    rois = boxes_to_array(proposals)[: cfg.roi_budget]
    scale, det, reg, cls = per_scale[0]
    maps = [FeatureMap(np.asarray(m), cfg.feature_stride) for m in (det, reg, cls)]
    scored = score_rois(*maps, rois * scale, head)
    targets = assign_detection_labels(rois * scale, [_scaled_gt(g, scale) for g in gts], taxonomy, cfg.fg_thresh)
    report = total_loss([scored.roi(i) for i in range(len(scored))], targets, cfg.ohem_batch, cfg.w_cls)
    return targets, report


def _scaled_gt(g, scale):
    return GroundTruth(g.box.scaled(scale), g.class_id, g.image)


# ---------------------------------------------------------------------------
# NMS benchmark

BENCH_HEADER = ("clusters", "detections", "wall_time_ms", "kept")


def bench_workload(
    num_dets: int,
    num_classes: int,
    seed: int = 0,
    locations: int = 100,
    spread: int = 10,
    extent=(1000.0, 800.0),
):
    """Detector-like NMS input: jittered boxes piled on a few object sites.

    Each site has a true class; its detections carry classes within
    ``+-spread`` of it, the way a decoupled detector's score mass lands on
    visually similar classes. Similar classes share contiguous NMS cluster
    blocks, so coarser clusterings leave fewer survivors per site.
    """
    rng = np.random.default_rng(seed)
    if num_dets == 0:
        return np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64)
    w, h = rng.uniform(40, 200, size=(2, locations))
    cx = rng.uniform(w / 2, extent[0] - w / 2)
    cy = rng.uniform(h / 2, extent[1] - h / 2)
    true_class = rng.integers(0, num_classes, size=locations)
    site = rng.integers(0, locations, size=num_dets)
    jitter = rng.normal(0.0, 0.03, size=(num_dets, 4))
    bw, bh = w[site], h[site]
    boxes = np.stack(
        [
            cx[site] - bw / 2 + jitter[:, 0] * bw,
            cy[site] - bh / 2 + jitter[:, 1] * bh,
            cx[site] + bw / 2 + jitter[:, 2] * bw,
            cy[site] + bh / 2 + jitter[:, 3] * bh,
        ],
        axis=1,
    )
    scores = rng.random(num_dets)
    classes = np.clip(true_class[site] + rng.integers(-spread, spread + 1, size=num_dets), 0, num_classes - 1)
    return boxes, scores, classes


def run_bench_nms(
    num_dets: int,
    num_classes: int,
    cluster_counts,
    repetitions: int = 5,
    seed: int = 0,
    iou_thresh: float = 0.3,
):
    """Median wall time of clustered NMS per cluster count.

    Returns ``(rows, kept_sets)``: CSV rows ``(clusters, detections,
    wall_time_ms, kept)`` and the kept index array of each configuration. One
    untimed warm-up call precedes the timed repetitions.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    boxes, scores, classes = bench_workload(num_dets, num_classes, seed)
    rows, kept_sets = [], []
    if num_dets == 0:
        return rows, kept_sets
    for m in cluster_counts:
        groups = NmsClusters.blocks(num_classes, int(m)).lookup(classes)
        keep = nms_indices(boxes, scores, classes, iou_thresh, groups)
        times = []
        for _ in range(repetitions):
            t0 = time.perf_counter()
            nms_indices(boxes, scores, classes, iou_thresh, groups)
            times.append(1e3 * (time.perf_counter() - t0))
        rows.append((int(m), num_dets, statistics.median(times), int(keep.shape[0])))
        kept_sets.append(keep)
    return rows, kept_sets


def bench_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(BENCH_HEADER)
    for m, n, ms, kept in rows:
        writer.writerow((m, n, f"{ms:.4f}", kept))
    return buf.getvalue()
