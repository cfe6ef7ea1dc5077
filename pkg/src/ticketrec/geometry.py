"""Axis-aligned box arithmetic and anchor-relative box regression.

Coordinates are continuous pixels with the origin at the top-left corner and
y growing downward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple


@dataclass(frozen=True, order=True)
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"box coordinates must be finite: {coords}")
        if self.x_max < self.x_min or self.y_max < self.y_min:
            raise ValueError(f"negative box extent: {coords}")

    @classmethod
    def from_center(cls, x: float, y: float, w: float, h: float) -> "Box":
        return cls(x - w / 2, y - h / 2, x + w / 2, y + h / 2)

    @property
    def x(self) -> float:
        return (self.x_min + self.x_max) / 2

    @property
    def y(self) -> float:
        return (self.y_min + self.y_max) / 2

    @property
    def w(self) -> float:
        return self.x_max - self.x_min

    @property
    def h(self) -> float:
        return self.y_max - self.y_min

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def translate(self, dx: float, dy: float) -> "Box":
        return Box(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)

    def scale(self, s: float) -> "Box":
        return Box(self.x_min * s, self.y_min * s, self.x_max * s, self.y_max * s)

    def clip(self, width: float, height: float) -> "Box":
        x0 = min(max(self.x_min, 0.0), width)
        y0 = min(max(self.y_min, 0.0), height)
        return Box(x0, y0, min(max(self.x_max, x0), width), min(max(self.y_max, y0), height))

    def contains(self, other: "Box", tol: float = 0.0) -> bool:
        return (
            other.x_min >= self.x_min - tol
            and other.y_min >= self.y_min - tol
            and other.x_max <= self.x_max + tol
            and other.y_max <= self.y_max + tol
        )


class RegressionTarget(NamedTuple):
    """Anchor-relative offsets: center shifts in anchor units, log size ratios."""

    t_x: float
    t_y: float
    t_w: float
    t_h: float


def area(b: Box) -> float:
    return (b.x_max - b.x_min) * (b.y_max - b.y_min)


def intersection_area(a: Box, b: Box) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 for disjoint boxes and for two zero-area boxes."""
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    union = area(a) + area(b) - inter
    if union <= 0:
        return 0.0
    return inter / union


def enclosing_box(a: Box, b: Box) -> Box:
    return Box(
        min(a.x_min, b.x_min),
        min(a.y_min, b.y_min),
        max(a.x_max, b.x_max),
        max(a.y_max, b.y_max),
    )


def center_distance_sq(a: Box, b: Box) -> float:
    dx = a.x - b.x
    dy = a.y - b.y
    return dx * dx + dy * dy


def encode(gt: Box, anchor: Box) -> RegressionTarget:
    """Regression target that moves ``anchor`` onto ``gt``.

    Raises:
        ValueError: if either box has zero width or height.
    """
    if anchor.w <= 0 or anchor.h <= 0:
        raise ValueError(f"anchor must have positive size: {anchor}")
    if gt.w <= 0 or gt.h <= 0:
        raise ValueError(f"ground truth must have positive size: {gt}")
    return RegressionTarget(
        (gt.x - anchor.x) / anchor.w,
        (gt.y - anchor.y) / anchor.h,
        math.log(gt.w / anchor.w),
        math.log(gt.h / anchor.h),
    )


def decode(t: RegressionTarget, anchor: Box) -> Box:
    if anchor.w <= 0 or anchor.h <= 0:
        raise ValueError(f"anchor must have positive size: {anchor}")
    if not all(math.isfinite(v) for v in t):
        raise ValueError(f"regression target must be finite: {tuple(t)}")
    x = anchor.x + t.t_x * anchor.w
    y = anchor.y + t.t_y * anchor.h
    w = anchor.w * math.exp(t.t_w)
    h = anchor.h * math.exp(t.t_h)
    return Box.from_center(x, y, w, h)
