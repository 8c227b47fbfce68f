"""Pipeline configuration: a flat YAML mapping plus ``key=value`` overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .anchors import AnchorConfig
from .geometry import ImageExtent

NMS_MODES = ("per-class", "clustered", "agnostic")


@dataclass
class PipelineConfig:
    num_classes: int = 50
    num_superclasses: int = 1
    grid: int = 7
    feature_stride: float = 16.0
    image_width: int = 500
    image_height: int = 375
    anchor_scales: list[float] = field(default_factory=lambda: [64.0, 128.0, 256.0])
    anchor_ratios: list[float] = field(default_factory=lambda: [0.5, 1.0, 2.0])
    anchor_stride: float = 16.0
    roi_budget: int = 300
    nms_mode: str = "per-class"
    nms_clusters: int | None = None
    nms_iou: float = 0.3
    score_floor: float = 0.05
    top_k: int = 100
    # image scale factors for multi-scale inference; 1.0 is the base resolution
    scales: list[float] = field(default_factory=lambda: [1.0])
    fg_thresh: float = 0.5
    ohem_batch: int = 128
    w_cls: float = 0.05
    seed: int = 0
    plant_gap: float = 4.0
    noise: float = 0.1

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if not 1 <= self.num_superclasses <= self.num_classes:
            raise ValueError(f"num_superclasses must lie in [1, num_classes], got {self.num_superclasses}")
        if self.grid < 1:
            raise ValueError("grid must be >= 1")
        if self.feature_stride <= 0 or self.anchor_stride <= 0:
            raise ValueError("strides must be positive")
        if self.nms_mode not in NMS_MODES:
            raise ValueError(f"nms_mode must be one of {NMS_MODES}, got {self.nms_mode!r}")
        if self.nms_mode == "clustered":
            if self.nms_clusters is None or not 1 <= self.nms_clusters <= self.num_classes:
                raise ValueError("clustered NMS needs nms_clusters in [1, num_classes]")
        if not 0.0 < self.nms_iou <= 1.0:
            raise ValueError("nms_iou must lie in (0, 1]")
        if self.top_k < 0 or self.roi_budget < 0:
            raise ValueError("top_k and roi_budget must be >= 0")
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ValueError("scales must be a non-empty list of positive factors")
        if not 0.0 <= self.w_cls:
            raise ValueError("w_cls must be >= 0")
        ImageExtent(self.image_width, self.image_height)
        self.anchor_config()

    @property
    def extent(self) -> ImageExtent:
        return ImageExtent(self.image_width, self.image_height)

    def anchor_config(self) -> AnchorConfig:
        return AnchorConfig(tuple(self.anchor_scales), tuple(self.anchor_ratios), self.anchor_stride)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False), encoding="utf-8")

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path=None, overrides=()) -> "PipelineConfig":
        return cls.from_dict(load_doc(path, overrides))


def load_doc(path=None, overrides=()) -> dict:
    """Raw key-value mapping from an optional YAML file plus ``key=value`` overrides."""
    doc = {}
    if path is not None:
        doc = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        if not isinstance(doc, dict):
            raise ValueError(f"{path}: config must be a key-value mapping")
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"override {item!r} is not key=value")
        doc[key.strip().replace("-", "_")] = yaml.safe_load(value)
    return doc
