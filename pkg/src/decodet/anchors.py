"""Anchor grids for region proposals."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import BBox, ImageExtent


@dataclass(frozen=True)
class AnchorConfig:
    scales: tuple[float, ...] = (64.0, 128.0, 256.0)
    # width:height, so 2.0 means a box twice as wide as tall
    ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    stride: float = 16.0

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ValueError(f"anchor scales must be positive, got {self.scales}")
        if not self.ratios or any(r <= 0 for r in self.ratios):
            raise ValueError(f"anchor ratios must be positive, got {self.ratios}")
        if self.stride <= 0:
            raise ValueError(f"anchor stride must be positive, got {self.stride}")

    @property
    def per_center(self) -> int:
        return len(self.scales) * len(self.ratios)


def base_anchors(cfg: AnchorConfig) -> np.ndarray:
    """Anchors centred at the origin, ``(S*R, 4)``, scale-major then ratio.

    Ratio ``r`` at scale ``s`` keeps the area at ``s**2``: width ``s*sqrt(r)``,
    height ``s/sqrt(r)``.
    """
    rows = []
    for s in cfg.scales:
        for r in cfg.ratios:
            w, h = s * math.sqrt(r), s / math.sqrt(r)
            rows.append((-0.5 * w, -0.5 * h, 0.5 * w, 0.5 * h))
    return np.array(rows, dtype=np.float64)


def anchor_centers(cfg: AnchorConfig, extent: ImageExtent) -> np.ndarray:
    """Row-major grid of centres at ``(i + 0.5) * stride`` covering the image."""
    nx = max(1, math.ceil(extent.width / cfg.stride))
    ny = max(1, math.ceil(extent.height / cfg.stride))
    xs = (np.arange(nx) + 0.5) * cfg.stride
    ys = (np.arange(ny) + 0.5) * cfg.stride
    cy, cx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([cx.ravel(), cy.ravel()], axis=1)


def anchors_at(centers, cfg: AnchorConfig) -> np.ndarray:
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    shifts = np.concatenate([centers, centers], axis=1)
    return (shifts[:, None, :] + base_anchors(cfg)[None]).reshape(-1, 4)


def generate_anchors_array(cfg: AnchorConfig, extent: ImageExtent) -> np.ndarray:
    """All anchors as an ``(centres * S * R, 4)`` array; not clipped to the image."""
    return anchors_at(anchor_centers(cfg, extent), cfg)


def generate_anchors(cfg: AnchorConfig, extent: ImageExtent) -> list[BBox]:
    return [BBox.from_seq(row) for row in generate_anchors_array(cfg, extent)]
