"""Text-shaped anchor grids and anchor/ground-truth assignment.

An anchor of size ``s`` and ratio ``r`` is ``s`` pixels wide and ``s * r``
pixels tall, so ratios below 1 give the wide, slender boxes that fit
horizontal text lines.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .geometry import Box, RegressionTarget, encode

DEFAULT_SIZES = (32.0, 48.0, 64.0, 80.0)
DEFAULT_RATIOS = (0.2, 0.5, 0.8, 1.0, 1.2, 1.5)

POSITIVE = 1
NEGATIVE = 0
IGNORE = -1


@dataclass(frozen=True)
class AnchorSpec:
    sizes: tuple[float, ...] = DEFAULT_SIZES
    ratios: tuple[float, ...] = DEFAULT_RATIOS
    stride: int = 16

    def __post_init__(self) -> None:
        object.__setattr__(self, "sizes", tuple(float(s) for s in self.sizes))
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        if not self.sizes or any(s <= 0 for s in self.sizes):
            raise ValueError(f"anchor sizes must be nonempty and positive: {self.sizes}")
        if not self.ratios or any(r <= 0 for r in self.ratios):
            raise ValueError(f"anchor ratios must be nonempty and positive: {self.ratios}")
        if int(self.stride) != self.stride or self.stride < 1:
            raise ValueError(f"stride must be a positive integer: {self.stride}")

    @property
    def anchors_per_cell(self) -> int:
        return len(self.sizes) * len(self.ratios)

    def cell_shapes(self) -> np.ndarray:
        """``(anchors_per_cell, 2)`` array of (width, height), size-major, ratio-minor."""
        return np.array([(s, s * r) for s in self.sizes for r in self.ratios])


@dataclass(frozen=True, eq=False)
class AnchorGrid:
    """Anchors over a ``grid_h x grid_w`` feature map.

    ``coords`` holds ``[x_min, y_min, x_max, y_max]`` rows ordered row-major over
    cells, then by size, then by ratio.
    """

    spec: AnchorSpec
    grid_h: int
    grid_w: int
    coords: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return self.coords.shape[0]

    @cached_property
    def boxes(self) -> list[Box]:
        return [Box(*row) for row in self.coords.tolist()]

    def box(self, index: int) -> Box:
        return Box(*self.coords[index].tolist())

    def index(self, row: int, col: int, size_idx: int, ratio_idx: int) -> int:
        per_cell = self.spec.anchors_per_cell
        return (row * self.grid_w + col) * per_cell + size_idx * len(self.spec.ratios) + ratio_idx

    def ratio_of(self, index: int) -> float:
        return self.spec.ratios[index % len(self.spec.ratios)]


def generate_anchors(spec: AnchorSpec, grid_h: int, grid_w: int) -> AnchorGrid:
    if grid_h < 1 or grid_w < 1:
        raise ValueError(f"grid dimensions must be >= 1, got {grid_h}x{grid_w}")
    st = spec.stride
    # cell (row i, col j) is centered at x = j*stride + stride/2, y = i*stride + stride/2
    cy, cx = np.meshgrid(
        np.arange(grid_h) * st + st / 2.0, np.arange(grid_w) * st + st / 2.0, indexing="ij"
    )
    centers = np.stack([cx.ravel(), cy.ravel()], axis=1)[:, None, :]
    half = spec.cell_shapes()[None, :, :] / 2.0
    coords = np.concatenate([centers - half, centers + half], axis=2).reshape(-1, 4)
    coords.setflags(write=False)
    return AnchorGrid(spec, grid_h, grid_w, coords)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(n, 4)`` and ``(m, 4)`` corner arrays."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out


@dataclass(frozen=True, eq=False)
class AnchorMatch:
    labels: np.ndarray
    matched_gt: np.ndarray
    max_iou: np.ndarray
    targets: dict[int, RegressionTarget]

    @property
    def positive_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels == POSITIVE)


def match_anchors(
    grid: AnchorGrid, gt: Sequence[Box], pos_iou: float = 0.7, neg_iou: float = 0.3
) -> AnchorMatch:
    """Label anchors positive / negative / ignore against ground-truth boxes.

    Every ground-truth box with positive area gets at least one positive
    anchor: its highest-IoU anchor(s), or the nearest-centered anchor when it
    overlaps none.
    """
    if not 0.0 <= neg_iou <= pos_iou <= 1.0:
        raise ValueError(f"need 0 <= neg_iou <= pos_iou <= 1, got {neg_iou}, {pos_iou}")
    n = len(grid)
    if not gt:
        return AnchorMatch(
            np.full(n, NEGATIVE, dtype=np.int8), np.full(n, -1), np.zeros(n), {}
        )
    gt_arr = np.array([g.as_tuple() for g in gt], dtype=float)
    ious = iou_matrix(grid.coords, gt_arr)
    best_gt = ious.argmax(axis=1)
    max_iou = ious.max(axis=1)

    labels = np.full(n, IGNORE, dtype=np.int8)
    labels[max_iou < neg_iou] = NEGATIVE
    labels[max_iou >= pos_iou] = POSITIVE
    matched = best_gt.copy()

    anchor_cx = (grid.coords[:, 0] + grid.coords[:, 2]) / 2
    anchor_cy = (grid.coords[:, 1] + grid.coords[:, 3]) / 2
    for g, box in enumerate(gt):
        if box.w <= 0 or box.h <= 0:
            continue
        col = ious[:, g]
        top = col.max()
        if top > 0:
            forced = np.flatnonzero(col == top)
        else:
            d2 = (anchor_cx - box.x) ** 2 + (anchor_cy - box.y) ** 2
            forced = np.array([int(d2.argmin())])
        labels[forced] = POSITIVE
        matched[forced] = g

    matched = np.where(labels == POSITIVE, matched, -1)
    targets = {
        int(i): encode(gt[int(matched[i])], grid.box(int(i))) for i in np.flatnonzero(labels == POSITIVE)
    }
    return AnchorMatch(labels, matched, max_iou, targets)
