"""Axis-aligned bounding-box arithmetic shared by every other module.

Boxes follow the COCO convention: ``[x, y, w, h]`` with the origin at the
image's top-left corner, half-open pixel intervals ``[x, x+w) x [y, y+h)``,
and float coordinates. Pixel placement rounds half-up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


def round_half_up(v: float) -> int:
    """Round to the nearest integer with ties going up (1.5 -> 2, 2.5 -> 3)."""
    return math.floor(v + 0.5)


@dataclass(frozen=True)
class BBox:
    """A COCO-style box. ``category_id`` is None for plain regions such as
    trigger placements."""

    x: float
    y: float
    w: float
    h: float
    category_id: int | None = None

    def __post_init__(self):
        for v in (self.x, self.y, self.w, self.h):
            if not math.isfinite(v):
                raise ValueError(f"non-finite box coordinate in {self!r}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box sides must be positive: w={self.w}, h={self.h}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h


def intersection_area(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; 0.0 for disjoint (including edge-touching) boxes."""
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def contains_point(b: BBox, px: float, py: float) -> bool:
    """Half-open containment: x <= px < x+w and y <= py < y+h."""
    return b.x <= px < b.x2 and b.y <= py < b.y2


def center(b: BBox) -> tuple[float, float]:
    return (b.x + b.w / 2.0, b.y + b.h / 2.0)


def centered_region(box: BBox, w: int, h: int) -> BBox:
    """Integer-pixel region of size ``w x h`` centred on ``box``.

    The top-left corner is ``round_half_up(center - size/2)``, which keeps the
    region inside ``box`` whenever the box has integer coordinates and is at
    least as large as the region.
    """
    tlx = round_half_up(box.x + (box.w - w) / 2.0)
    tly = round_half_up(box.y + (box.h - h) / 2.0)
    return BBox(float(tlx), float(tly), float(w), float(h))


def shift_into_frame(region: BBox, img_w: int, img_h: int) -> tuple[BBox, bool]:
    """Clamp an integer-pixel region into the frame; returns (region, shifted)."""
    if region.w > img_w or region.h > img_h:
        raise ValueError(
            f"region {region.w}x{region.h} cannot fit in a {img_w}x{img_h} image"
        )
    tlx = min(max(region.x, 0.0), float(img_w) - region.w)
    tly = min(max(region.y, 0.0), float(img_h) - region.h)
    if tlx == region.x and tly == region.y:
        return region, False
    return BBox(tlx, tly, region.w, region.h, region.category_id), True
