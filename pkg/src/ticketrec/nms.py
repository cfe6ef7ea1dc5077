"""Greedy non-maximum suppression, per class and location-unique.

``standard_nms`` suppresses only within a class, so two different character
hypotheses stacked on the same spot both survive. ``lucnms`` ignores the class
when suppressing, which leaves at most one hypothesis per location.

Ordering is by descending score, then ascending ``class_id``, then the box
corners lexicographically. Fully tied detections keep their input order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Hashable, Sequence

import numpy as np

from .geometry import Box, area, iou


@dataclass(frozen=True)
class ScoredDetection:
    box: Box
    class_id: Any
    score: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")
        if area(self.box) <= 0:
            raise ValueError(f"detection box must have positive area: {self.box}")


def _sort_key(d: ScoredDetection) -> tuple:
    return (-d.score, d.class_id, d.box.as_tuple())


def _check_threshold(iou_threshold: float) -> None:
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must lie in [0, 1], got {iou_threshold}")


def _greedy(dets: Sequence[ScoredDetection], iou_threshold: float, class_agnostic: bool) -> list[ScoredDetection]:
    _check_threshold(iou_threshold)
    if not dets:
        return []
    order = sorted(range(len(dets)), key=lambda i: _sort_key(dets[i]))
    ordered = [dets[i] for i in order]
    coords = np.array([d.box.as_tuple() for d in ordered], dtype=float)
    x0, y0, x1, y1 = coords.T
    areas = (x1 - x0) * (y1 - y0)
    if class_agnostic:
        groups = np.zeros(len(ordered), dtype=np.int64)
    else:
        ids: dict[Hashable, int] = {}
        groups = np.array([ids.setdefault(d.class_id, len(ids)) for d in ordered])

    alive = np.ones(len(ordered), dtype=bool)
    keep: list[int] = []
    for i in range(len(ordered)):
        if not alive[i]:
            continue
        keep.append(i)
        rest = np.flatnonzero(alive[i + 1 :]) + i + 1
        if rest.size == 0:
            break
        if not class_agnostic:
            rest = rest[groups[rest] == groups[i]]
        iw = np.minimum(x1[i], x1[rest]) - np.maximum(x0[i], x0[rest])
        ih = np.minimum(y1[i], y1[rest]) - np.maximum(y0[i], y0[rest])
        inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
        # same operation order as geometry.iou so threshold ties agree exactly
        overlap = inter / (areas[i] + areas[rest] - inter)
        alive[rest[overlap >= iou_threshold]] = False
    return [ordered[i] for i in keep]


def standard_nms(dets: Sequence[ScoredDetection], iou_threshold: float = 0.5) -> list[ScoredDetection]:
    """Per-class greedy NMS."""
    return _greedy(dets, iou_threshold, class_agnostic=False)


def lucnms(dets: Sequence[ScoredDetection], iou_threshold: float = 0.5) -> list[ScoredDetection]:
    """Location-unique NMS: greedy suppression across all classes."""
    return _greedy(dets, iou_threshold, class_agnostic=True)


def brute_force_nms_oracle(
    dets: Sequence[ScoredDetection], iou_threshold: float, class_agnostic: bool
) -> list[ScoredDetection]:
    """Quadratic reference: repeatedly take the best remaining detection and
    drop everything it suppresses."""
    _check_threshold(iou_threshold)
    remaining = [(_sort_key(d), d) for d in dets]
    kept: list[ScoredDetection] = []
    while remaining:
        best = 0
        for j in range(1, len(remaining)):
            if remaining[j][0] < remaining[best][0]:
                best = j
        top = remaining.pop(best)[1]
        kept.append(top)
        remaining = [
            (k, d)
            for k, d in remaining
            if not ((class_agnostic or d.class_id == top.class_id) and iou(top.box, d.box) >= iou_threshold)
        ]
    return kept
