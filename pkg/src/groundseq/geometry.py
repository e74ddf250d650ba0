"""Axis-aligned boxes in pixel coordinates and letterbox frame mapping."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class BBox:
    """Corner-form box; callers keep x0 <= x1 and y0 <= y1 unless noted."""

    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height

    def is_valid(self) -> bool:
        return self.x0 <= self.x1 and self.y0 <= self.y1

    def as_list(self) -> list[float]:
        return [self.x0, self.y0, self.x1, self.y1]


def boxes_disjoint(a: BBox, b: BBox) -> bool:
    """True when the interiors share no area (edge contact is allowed)."""
    return a.x1 <= b.x0 or b.x1 <= a.x0 or a.y1 <= b.y0 or b.y1 <= a.y0


@dataclass(frozen=True)
class Letterbox:
    """Aspect-preserving map from a source frame into a destination frame,
    centered, with equal padding on the short side."""

    src_w: float
    src_h: float
    dst_w: float
    dst_h: float

    @property
    def scale(self) -> float:
        return min(self.dst_w / self.src_w, self.dst_h / self.src_h)

    @property
    def offset_x(self) -> float:
        return (self.dst_w - self.src_w * self.scale) / 2.0

    @property
    def offset_y(self) -> float:
        return (self.dst_h - self.src_h * self.scale) / 2.0

    def apply_box(self, box: BBox) -> BBox:
        s, ox, oy = self.scale, self.offset_x, self.offset_y
        return BBox(box.x0 * s + ox, box.y0 * s + oy, box.x1 * s + ox, box.y1 * s + oy)

    def invert_box(self, box: BBox) -> BBox:
        s, ox, oy = self.scale, self.offset_x, self.offset_y
        return BBox((box.x0 - ox) / s, (box.y0 - oy) / s,
                    (box.x1 - ox) / s, (box.y1 - oy) / s)
