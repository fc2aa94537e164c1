"""Bounding boxes in normalized (cx, cy, w, h) coordinates."""

from __future__ import annotations

from dataclasses import dataclass, replace

PERSON_CLASS = 0


@dataclass(frozen=True)
class BoundingBox:
    """Box as fractions of image dimensions; class 0 is 'person'."""

    cx: float
    cy: float
    w: float
    h: float
    class_id: int = PERSON_CLASS
    score: float | None = None

    def __post_init__(self):
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValueError(f"box center out of range: ({self.cx}, {self.cy})")
        if not (0.0 <= self.w <= 1.0 and 0.0 <= self.h <= 1.0):
            raise ValueError(f"box size out of range: ({self.w}, {self.h})")

    def extent(self) -> tuple[float, float, float, float]:
        """(x0, y0, x1, y1), clipped to the unit square."""
        x0 = max(0.0, self.cx - self.w / 2.0)
        y0 = max(0.0, self.cy - self.h / 2.0)
        x1 = min(1.0, self.cx + self.w / 2.0)
        y1 = min(1.0, self.cy + self.h / 2.0)
        return x0, y0, x1, y1

    def with_score(self, score: float) -> "BoundingBox":
        return replace(self, score=score)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of the clipped extents; degenerate boxes give 0."""
    ax0, ay0, ax1, ay1 = a.extent()
    bx0, by0, bx1, by1 = b.extent()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    area_a = (ax1 - ax0) * (ay1 - ay0)
    area_b = (bx1 - bx0) * (by1 - by0)
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def nms(boxes: list[BoundingBox], iou_thresh: float = 0.45) -> list[BoundingBox]:
    """Greedy non-maximum suppression on score-sorted boxes."""
    ordered = sorted(boxes, key=lambda b: -(b.score if b.score is not None else 0.0))
    kept: list[BoundingBox] = []
    for cand in ordered:
        if all(iou(cand, k) < iou_thresh for k in kept):
            kept.append(cand)
    return kept
