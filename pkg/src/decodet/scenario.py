"""Synthetic scenes with planted objects, used to exercise the whole pipeline.

For each planted object a *primary proposal* is taken from the anchor grid
(the anchor with best IoU to the object, then jittered). The object's
footprint is the union of its box and that proposal. Inside the footprint:

* every channel of the object's super-class bank in the detection map is
  raised by ``gap + ln(K + 1)`` (elsewhere the background bank is raised);
* the classification channel of the object's class is raised by
  ``gap + ln(C)``;
* the regression map holds the constant ``encode(object, primary proposal)``
  on all P*P positions of each of the four delta groups, dilated by one cell
  so every bilinear neighbour of the proposal reads it.

So the primary proposal decodes exactly onto the object. The ``ln`` terms
keep the softmax winners clear of 0.5 whatever K and C are. Gaussian noise
is added to both score maps. Footprints, dilated by one feature cell, never
touch each other; background proposals stay clear of all of them.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .anchors import generate_anchors_array
from .config import PipelineConfig
from .formats import (
    DataError,
    read_boxes,
    read_ground_truth,
    read_taxonomy,
    read_tensor,
    write_boxes,
    write_ground_truth,
    write_taxonomy,
    write_tensor,
)
from .geometry import BBox, ImageExtent, encode_boxes, iou_matrix
from .targets import GroundTruth
from .taxonomy import Taxonomy, build_taxonomy, class_representations

OBJECT_SIZE = (48.0, 144.0)
EXTRA_PROPOSALS = 2
CLASS_DIM = 16
# total dilated footprint area may not exceed this share of the image
DENSITY_BOUND = 0.6
PLACEMENT_ATTEMPTS = 4000


class ScenarioError(DataError):
    pass


@dataclass
class ScaleMaps:
    scale: float
    detection: np.ndarray
    regression: np.ndarray
    classification: np.ndarray


@dataclass
class Scenario:
    image: int
    extent: ImageExtent
    objects: list[GroundTruth]
    proposals: np.ndarray
    maps: list[ScaleMaps] = field(default_factory=list)


def synthetic_taxonomy(num_classes: int, num_superclasses: int, seed: int) -> Taxonomy:
    """Cluster random class vectors drawn around ``K`` latent centres."""
    if num_superclasses == 1:
        return Taxonomy.objectness(num_classes)
    rng = np.random.default_rng([seed, 7])
    centres = rng.normal(0.0, 4.0, size=(num_superclasses, CLASS_DIM))
    owner = np.arange(num_classes) % num_superclasses
    samples = [rng.normal(centres[owner[c]], 1.0, size=(4, CLASS_DIM)) for c in range(num_classes)]
    return build_taxonomy(class_representations(samples), num_superclasses, seed=seed)


def _dilate(box: np.ndarray, pad: float) -> np.ndarray:
    return box + np.array([-pad, -pad, pad, pad])


def _overlaps(a: np.ndarray, b: np.ndarray) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def _place_objects(rng, cfg: PipelineConfig, num_objects: int, anchors: np.ndarray):
    extent = cfg.extent
    stride = cfg.feature_stride
    lo, hi = OBJECT_SIZE
    # objects keep a one-cell margin to the image border
    hi_w = min(hi, extent.width - 2 * stride)
    hi_h = min(hi, extent.height - 2 * stride)
    if num_objects and (hi_w < lo or hi_h < lo):
        raise ScenarioError(f"a {extent.width}x{extent.height} image cannot hold a {lo:g} px object with a {stride:g} px margin")
    placed, primaries, footprints = [], [], []
    total = 0.0
    for _ in range(num_objects):
        for _attempt in range(PLACEMENT_ATTEMPTS):
            w, h = rng.uniform(lo, hi_w), rng.uniform(lo, hi_h)
            x1 = rng.uniform(stride, extent.width - stride - w)
            y1 = rng.uniform(stride, extent.height - stride - h)
            gt = np.array([x1, y1, x1 + w, y1 + h])
            best = anchors[int(np.argmax(iou_matrix(gt[None], anchors)[0]))]
            bw, bh = best[2] - best[0], best[3] - best[1]
            shift = rng.uniform(-0.05, 0.05, size=2) * (bw, bh)
            prop = best + np.array([shift[0], shift[1], shift[0], shift[1]])
            union = np.array([min(gt[0], prop[0]), min(gt[1], prop[1]), max(gt[2], prop[2]), max(gt[3], prop[3])])
            fp = _dilate(union, stride)
            if fp[0] < 0 or fp[1] < 0 or fp[2] > extent.width or fp[3] > extent.height:
                continue
            if any(_overlaps(fp, other) for other in footprints):
                continue
            break
        else:
            raise ScenarioError(f"could not place {num_objects} non-overlapping objects in {extent.width}x{extent.height}")
        area = (fp[2] - fp[0]) * (fp[3] - fp[1])
        total += area
        if total > DENSITY_BOUND * extent.width * extent.height:
            raise ScenarioError(f"{num_objects} objects exceed the density bound of {DENSITY_BOUND:.0%} of the image")
        placed.append(gt)
        primaries.append(prop)
        footprints.append(fp)
    return placed, primaries, footprints


def _extra_proposals(rng, primary: np.ndarray, union: np.ndarray) -> list[np.ndarray]:
    out = []
    w, h = primary[2] - primary[0], primary[3] - primary[1]
    for _ in range(EXTRA_PROPOSALS):
        d = rng.uniform(-0.04, 0.04, size=4) * (w, h, w, h)
        box = primary + d
        box[0::2] = np.clip(box[0::2], union[0], union[2])
        box[1::2] = np.clip(box[1::2], union[1], union[3])
        if box[2] - box[0] > 1 and box[3] - box[1] > 1:
            out.append(box)
    return out


def _background_proposals(rng, cfg: PipelineConfig, footprints, count: int) -> list[np.ndarray]:
    extent = cfg.extent
    out = []
    for _ in range(count * 20):
        if len(out) >= count:
            break
        w, h = rng.uniform(24.0, 160.0, size=2)
        x1 = rng.uniform(0, max(1.0, extent.width - w))
        y1 = rng.uniform(0, max(1.0, extent.height - h))
        box = np.array([x1, y1, min(x1 + w, extent.width), min(y1 + h, extent.height)])
        pad = _dilate(box, cfg.feature_stride)
        if any(_overlaps(pad, fp) for fp in footprints):
            continue
        out.append(box)
    return out


def _cell_mask(box: np.ndarray, hf: int, wf: int, stride: float) -> np.ndarray:
    cy = (np.arange(hf) + 0.5) * stride
    cx = (np.arange(wf) + 0.5) * stride
    return ((cy >= box[1]) & (cy <= box[3]))[:, None] & ((cx >= box[0]) & (cx <= box[2]))[None, :]


def render_maps(
    rng,
    cfg: PipelineConfig,
    taxonomy: Taxonomy,
    objects: list[GroundTruth],
    primaries,
    scale: float,
) -> ScaleMaps:
    stride = cfg.feature_stride
    width, height = cfg.image_width * scale, cfg.image_height * scale
    hf, wf = max(1, math.ceil(height / stride)), max(1, math.ceil(width / stride))
    k, c, p = cfg.num_superclasses, cfg.num_classes, cfg.grid
    det_gap = cfg.plant_gap + math.log(k + 1)
    cls_gap = cfg.plant_gap + math.log(c)

    det = rng.normal(0.0, cfg.noise, size=(k + 1, p * p, hf, wf))
    cls = rng.normal(0.0, cfg.noise, size=(c, hf, wf))
    reg = np.zeros((4, p * p, hf, wf))
    background = np.ones((hf, wf), dtype=bool)
    for obj, prop in zip(objects, primaries):
        gt = obj.box.as_array() * scale
        prop = prop * scale
        union = np.array([min(gt[0], prop[0]), min(gt[1], prop[1]), max(gt[2], prop[2]), max(gt[3], prop[3])])
        inside = _cell_mask(union, hf, wf, stride)
        background &= ~inside
        det[taxonomy.superclass_of(obj.class_id)][:, inside] += det_gap
        cls[obj.class_id][inside] += cls_gap
        delta = encode_boxes(gt[None], prop[None])[0]
        near = _cell_mask(_dilate(union, stride), hf, wf, stride)
        reg[:, :, near] = delta[:, None, None]
    det[k][:, background] += det_gap
    return ScaleMaps(
        scale,
        det.reshape(-1, hf, wf).astype(np.float32),
        reg.reshape(-1, hf, wf).astype(np.float32),
        cls.astype(np.float32),
    )


def generate_scenario(cfg: PipelineConfig, num_objects: int, image: int = 0, taxonomy: Taxonomy | None = None) -> Scenario:
    """One synthetic image, deterministic in ``(cfg.seed, image)``."""
    if num_objects < 0:
        raise ValueError("num_objects must be >= 0")
    taxonomy = taxonomy or synthetic_taxonomy(cfg.num_classes, cfg.num_superclasses, cfg.seed)
    rng = np.random.default_rng([cfg.seed, image])
    anchors = generate_anchors_array(cfg.anchor_config(), cfg.extent)
    boxes, primaries, footprints = _place_objects(rng, cfg, num_objects, anchors)
    classes = rng.integers(0, cfg.num_classes, size=num_objects)
    objects = [GroundTruth(BBox.from_seq(b), int(c), image) for b, c in zip(boxes, classes)]

    proposals = []
    for gt, prop, fp in zip(boxes, primaries, footprints):
        union = _dilate(fp, -cfg.feature_stride)
        proposals.append(prop)
        proposals.extend(_extra_proposals(rng, prop, union))
    proposals.extend(_background_proposals(rng, cfg, footprints, max(0, cfg.roi_budget - len(proposals))))
    proposals = np.array(proposals, dtype=np.float64).reshape(-1, 4)
    proposals = proposals[rng.permutation(proposals.shape[0])]

    maps = [render_maps(rng, cfg, taxonomy, objects, primaries, s) for s in cfg.scales]
    return Scenario(image, cfg.extent, objects, proposals, maps)


# ---------------------------------------------------------------------------
# on-disk layout
#
#   root/scenario.json, root/gt.jsonl, root/taxonomy.json
#   root/image_0000/proposals.jsonl
#   root/image_0000/scale_0/{detection,regression,classification}.ddk

MAP_NAMES = ("detection", "regression", "classification")


def image_dir(root, image: int) -> Path:
    return Path(root) / f"image_{image:04d}"


def write_dataset(root, cfg: PipelineConfig, num_images: int, num_objects: int) -> list[Scenario]:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    taxonomy = synthetic_taxonomy(cfg.num_classes, cfg.num_superclasses, cfg.seed)
    scenes = [generate_scenario(cfg, num_objects, image=i, taxonomy=taxonomy) for i in range(num_images)]
    for scene in scenes:
        d = image_dir(root, scene.image)
        d.mkdir(exist_ok=True)
        write_boxes(d / "proposals.jsonl", scene.proposals)
        for idx, m in enumerate(scene.maps):
            sd = d / f"scale_{idx}"
            sd.mkdir(exist_ok=True)
            for name, arr in zip(MAP_NAMES, (m.detection, m.regression, m.classification)):
                write_tensor(sd / f"{name}.ddk", arr)
    write_ground_truth(root / "gt.jsonl", [g for s in scenes for g in s.objects])
    write_taxonomy(root / "taxonomy.json", taxonomy)
    meta = {
        "num_images": num_images,
        "num_objects": num_objects,
        "num_classes": cfg.num_classes,
        "num_superclasses": cfg.num_superclasses,
        "grid": cfg.grid,
        "feature_stride": cfg.feature_stride,
        "image_width": cfg.image_width,
        "image_height": cfg.image_height,
        "scales": list(cfg.scales),
        "seed": cfg.seed,
    }
    (root / "scenario.json").write_text(json.dumps(meta, indent=1) + "\n", encoding="utf-8")
    return scenes


def load_dataset(root):
    """Return ``(meta, taxonomy, gts, images)`` where ``images`` yields
    ``(image_id, proposals, [(scale, det, reg, cls), ...])`` lazily."""
    root = Path(root)
    meta_path = root / "scenario.json"
    if not meta_path.exists():
        raise DataError(f"{root}: not a scenario directory (missing scenario.json)")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    taxonomy = read_taxonomy(root / "taxonomy.json")
    gts = read_ground_truth(root / "gt.jsonl", meta["num_classes"])

    def images():
        for i in range(meta["num_images"]):
            d = image_dir(root, i)
            props = read_boxes(d / "proposals.jsonl")
            per_scale = []
            for idx, s in enumerate(meta["scales"]):
                sd = d / f"scale_{idx}"
                per_scale.append((s, *(read_tensor(sd / f"{n}.ddk") for n in MAP_NAMES)))
            yield i, props, per_scale

    return meta, taxonomy, gts, images
