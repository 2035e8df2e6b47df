"""Axis-aligned bounding-box helpers.

Boxes are ``(x0, y0, x1, y1)`` tuples in pixel coordinates with ``x0 < x1``
and ``y0 < y1``.
"""

from __future__ import annotations

Box = tuple[float, float, float, float]


def box_area(box: Box) -> float:
    x0, y0, x1, y1 = box
    return max(0.0, x1 - x0) * max(0.0, y1 - y0)


def box_valid(box: Box, width: int | None = None, height: int | None = None) -> bool:
    x0, y0, x1, y1 = box
    if not (x0 < x1 and y0 < y1):
        return False
    if width is not None and (x0 < 0 or x1 > width):
        return False
    if height is not None and (y0 < 0 or y1 > height):
        return False
    return True


def iou(a: Box, b: Box) -> float:
    ix0 = max(a[0], b[0])
    iy0 = max(a[1], b[1])
    ix1 = min(a[2], b[2])
    iy1 = min(a[3], b[3])
    inter = max(0.0, ix1 - ix0) * max(0.0, iy1 - iy0)
    if inter == 0.0:
        return 0.0
    return inter / (box_area(a) + box_area(b) - inter)


def pad_box(box: Box, pad_fraction: float, width: int, height: int) -> Box:
    """Expand the box by pad_fraction of its width/height on each side, then
    clamp to the frame. The result always contains box ∩ frame."""
    x0, y0, x1, y1 = box
    px = (x1 - x0) * pad_fraction
    py = (y1 - y0) * pad_fraction
    return (
        max(0.0, x0 - px),
        max(0.0, y0 - py),
        min(float(width), x1 + px),
        min(float(height), y1 + py),
    )


def contains_point(box: Box, x: float, y: float) -> bool:
    return box[0] <= x < box[2] and box[1] <= y < box[3]


def box_center(box: Box) -> tuple[float, float]:
    return ((box[0] + box[2]) / 2.0, (box[1] + box[3]) / 2.0)
