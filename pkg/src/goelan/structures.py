"""Box, detection and ground-truth records shared across the package."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in corner convention (x1, y1, x2, y2)."""

    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return max(0.0, self.width) * max(0.0, self.height)

    @property
    def is_valid(self) -> bool:
        return self.x1 < self.x2 and self.y1 < self.y2

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "BBox":
        return cls(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)

    def to_center(self) -> tuple[float, float, float, float]:
        return ((self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2, self.width, self.height)

    def scaled(self, sx: float, sy: float | None = None) -> "BBox":
        sy = sx if sy is None else sy
        return BBox(self.x1 * sx, self.y1 * sy, self.x2 * sx, self.y2 * sy)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class Detection:
    box: BBox
    class_id: int
    score: float


@dataclass(frozen=True)
class GroundTruthObject:
    """Labelled object in normalized center format, all values in [0, 1]."""

    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def to_bbox(self, width: float = 1.0, height: float | None = None) -> BBox:
        height = width if height is None else height
        return BBox.from_center(self.cx * width, self.cy * height, self.w * width, self.h * height)

    @classmethod
    def from_bbox(cls, class_id: int, box: BBox, width: float = 1.0, height: float | None = None) -> "GroundTruthObject":
        height = width if height is None else height
        cx, cy, w, h = box.to_center()
        return cls(class_id, cx / width, cy / height, w / width, h / height)
