"""Reference two-stage detector built on normalized cross-correlation.

Stage one finds keyword regions (by locating each field's printed caption)
or, for free-form tickets, text lines (anchor proposals grown along the ink).
Stage two finds characters inside a region, either by sliding every glyph
over it or by cutting it into ink columns and matching each cut.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image
from scipy import ndimage

from .anchors import AnchorGrid
from .geometry import Box, RegressionTarget, decode
from .glyphs import GlyphSet, GlyphTemplate, default_glyphs, render_text
from .nms import ScoredDetection, lucnms, standard_nms
from .raster import RasterImage
from .templates import TicketTemplate
from .ticket_model import CharDetection, KeywordRegion

SCALES = (0.9, 1.0, 1.1)
SCALE_TOLERANCE = 0.1
SEARCH_RADIUS = 12
# windows with less variance than this are treated as flat (score 0)
_FLAT_VARIANCE = 1e-6


class ResolutionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class DetectorStage:
    kind: str
    threshold: float
    nms: str
    iou_threshold: float = 0.5

    def __post_init__(self) -> None:
        if self.kind not in ("region", "character"):
            raise ValueError(f"unknown stage kind {self.kind!r}")
        if self.nms not in ("standard", "lucnms"):
            raise ValueError(f"unknown nms policy {self.nms!r}")
        for name in ("threshold", "iou_threshold"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    def suppress(self, dets: Sequence[ScoredDetection]) -> list[ScoredDetection]:
        fn = lucnms if self.nms == "lucnms" else standard_nms
        return fn(dets, self.iou_threshold)


REGION_STAGE = DetectorStage("region", 0.6, "standard")
CHAR_STAGE = DetectorStage("character", 0.7, "lucnms")


def ncc_map(image: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """Normalized cross-correlation of each kernel at every valid offset.

    ``image`` is ``(H, W)``, ``kernels`` is ``(K, kh, kw)``; the result is
    ``(K, H - kh + 1, W - kw + 1)`` with values in [-1, 1].
    """
    image = np.asarray(image, dtype=float)
    kernels = np.asarray(kernels, dtype=float)
    if kernels.ndim == 2:
        kernels = kernels[None]
    k, kh, kw = kernels.shape
    if image.shape[0] < kh or image.shape[1] < kw:
        return np.zeros((k, 0, 0))
    n = kh * kw
    zk = kernels - kernels.mean(axis=(1, 2), keepdims=True)
    knorm = np.sqrt((zk * zk).sum(axis=(1, 2)))
    win = sliding_window_view(image, (kh, kw))
    dots = np.einsum("yxij,kij->kyx", win, zk, optimize=True)
    s1 = win.sum(axis=(2, 3))
    s2 = np.einsum("yxij,yxij->yx", win, win, optimize=True)
    var = np.maximum(s2 - s1 * s1 / n, 0.0)
    den = knorm[:, None, None] * np.sqrt(var)[None]
    flat = (var <= _FLAT_VARIANCE * n)[None] | (knorm[:, None, None] == 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(flat, 0.0, dots / np.where(flat, 1.0, den))
    return np.clip(out, -1.0, 1.0)


def local_peaks(score_map: np.ndarray, threshold: float) -> list[tuple[int, int]]:
    """``(row, col)`` of 3x3 local maxima at or above ``threshold``, row-major."""
    if score_map.size == 0:
        return []
    peak = ndimage.maximum_filter(score_map, size=3, mode="constant", cval=-np.inf)
    ys, xs = np.nonzero((score_map >= threshold) & (score_map == peak))
    return list(zip(ys.tolist(), xs.tolist()))


def _vocab(vocabulary: GlyphSet | Iterable[GlyphTemplate]) -> list[GlyphTemplate]:
    glyphs = list(vocabulary.values()) if isinstance(vocabulary, GlyphSet) else list(vocabulary)
    if not glyphs:
        raise ValueError("vocabulary is empty")
    return glyphs


def char_hypotheses(
    roi: RasterImage, vocabulary: GlyphSet | Iterable[GlyphTemplate], threshold: float = CHAR_STAGE.threshold
) -> list[ScoredDetection]:
    """Every glyph's correlation peaks in ``roi``, before any suppression."""
    glyphs = _vocab(vocabulary)
    kh, kw = glyphs[0].bitmap.pixels.shape
    maps = ncc_map(roi.pixels, np.stack([g.bitmap.pixels for g in glyphs]))
    out = []
    for g, m in zip(glyphs, maps):
        for y, x in local_peaks(m, threshold):
            out.append(ScoredDetection(Box(x, y, x + kw, y + kh), g.content, float(min(max(m[y, x], 0.0), 1.0))))
    return out


def detect_chars(
    roi: RasterImage, vocabulary: GlyphSet | Iterable[GlyphTemplate], stage: DetectorStage = CHAR_STAGE
) -> list[CharDetection]:
    """Slide every glyph over ``roi``; positions are ROI-local."""
    if stage.kind != "character":
        raise ValueError("detect_chars needs a character stage")
    kept = stage.suppress(char_hypotheses(roi, vocabulary, stage.threshold))
    return [CharDetection(d.box, d.class_id, d.score) for d in kept]


def check_resolution(image: RasterImage, template: TicketTemplate) -> tuple[float, float]:
    sx = image.width / template.width
    sy = image.height / template.height
    if abs(sx - 1.0) > SCALE_TOLERANCE + 1e-12 or abs(sy - 1.0) > SCALE_TOLERANCE + 1e-12:
        raise ResolutionMismatch(
            f"image {image.width}x{image.height} is outside ±{SCALE_TOLERANCE:.0%} of template "
            f"{template.id} ({template.width}x{template.height})"
        )
    return sx, sy


def _scaled(pixels: np.ndarray, scale: float) -> np.ndarray:
    if scale == 1.0:
        return pixels
    h, w = pixels.shape
    size = (max(1, round(w * scale)), max(1, round(h * scale)))
    im = Image.fromarray(pixels.astype(np.float32))
    return np.asarray(im.resize(size, Image.Resampling.BILINEAR), dtype=float)


def detect_regions(
    image: RasterImage,
    template: TicketTemplate,
    glyphs: GlyphSet | None = None,
    stage: DetectorStage = REGION_STAGE,
    search_radius: int = SEARCH_RADIUS,
) -> list[KeywordRegion]:
    """Locate each fixed-form field through its caption.

    The caption is correlated inside a window around its expected place at
    each trial scale; the best peak's shift and scale are decoded over the
    field's prior box.
    """
    if stage.kind != "region":
        raise ValueError("detect_regions needs a region stage")
    if not template.fixed:
        raise ValueError(f"template {template.id} has no fixed field layout")
    check_resolution(image, template)
    glyphs = glyphs or default_glyphs()
    found: list[ScoredDetection] = []
    for f in template.fields:
        landmark = render_text(f.label, glyphs)
        prior = f.box
        best: tuple[float, float, float, float] | None = None
        for scale in SCALES:
            kern = _scaled(landmark, scale)
            ex = round(f.label_box.x_min * scale)
            ey = round(f.label_box.y_min * scale)
            win = image.crop(ex - search_radius, ey - search_radius,
                             ex + search_radius + kern.shape[1], ey + search_radius + kern.shape[0])
            m = ncc_map(win.pixels, kern)[0]
            for y, x in local_peaks(m, stage.threshold):
                cand = (float(m[y, x]), scale, x - search_radius, y - search_radius)
                # ties prefer the nominal scale, then the smaller shift
                if best is None or (cand[0], -abs(scale - 1.0), -abs(cand[2]) - abs(cand[3])) > (
                    best[0], -abs(best[1] - 1.0), -abs(best[2]) - abs(best[3])
                ):
                    best = cand
        if best is None:
            continue
        score, scale, ox, oy = best
        target = RegressionTarget(
            (prior.x * scale + ox - prior.x) / prior.w,
            (prior.y * scale + oy - prior.y) / prior.h,
            math.log(scale),
            math.log(scale),
        )
        box = decode(target, prior)
        box = Box(round(box.x_min), round(box.y_min), round(box.x_max), round(box.y_max)).clip(
            image.width, image.height
        )
        if box.w > 0 and box.h > 0:
            found.append(ScoredDetection(box, f.keyword.value, min(max(score, 0.0), 1.0)))
    kept = stage.suppress(found)
    by_value = {f.keyword.value: f.keyword for f in template.fields}
    return [KeywordRegion(by_value[d.class_id], d.box, d.score) for d in kept]


Scorer = Callable[[RasterImage, np.ndarray], np.ndarray]


def ink_density(image: RasterImage, coords: np.ndarray) -> np.ndarray:
    """Fraction of each box's area covered by ink; area outside the image counts as background."""
    mask = image.ink_mask().astype(np.int64)
    integral = np.zeros((image.height + 1, image.width + 1), dtype=np.int64)
    integral[1:, 1:] = mask.cumsum(0).cumsum(1)
    x0 = np.clip(np.floor(coords[:, 0]), 0, image.width).astype(int)
    y0 = np.clip(np.floor(coords[:, 1]), 0, image.height).astype(int)
    x1 = np.clip(np.ceil(coords[:, 2]), 0, image.width).astype(int)
    y1 = np.clip(np.ceil(coords[:, 3]), 0, image.height).astype(int)
    ink = integral[y1, x1] - integral[y0, x1] - integral[y1, x0] + integral[y0, x0]
    areas = (coords[:, 2] - coords[:, 0]) * (coords[:, 3] - coords[:, 1])
    return np.where(areas > 0, ink / np.where(areas > 0, areas, 1.0), 0.0)


def propose_text_regions(
    image: RasterImage,
    grid: AnchorGrid,
    scorer: Scorer = ink_density,
    threshold: float = 0.1,
    iou_threshold: float = 0.5,
) -> list[ScoredDetection]:
    """Score every anchor, keep those at or above ``threshold``, suppress overlaps.

    Kept boxes are clipped to the image; their class is the anchor's ratio.
    """
    st = grid.spec.stride
    need = (math.ceil(image.height / st), math.ceil(image.width / st))
    if (grid.grid_h, grid.grid_w) != need:
        raise ValueError(f"grid {grid.grid_h}x{grid.grid_w} does not cover a {image.width}x{image.height} image (need {need[0]}x{need[1]})")
    scores = np.asarray(scorer(image, grid.coords), dtype=float)
    idx = np.flatnonzero((scores >= threshold) & (scores > 0))
    dets = []
    for i in idx.tolist():
        box = grid.box(i).clip(image.width, image.height)
        if box.w > 0 and box.h > 0:
            dets.append(ScoredDetection(box, grid.ratio_of(i), float(min(scores[i], 1.0))))
    return standard_nms(dets, iou_threshold)


def _ink_extent(mask: np.ndarray) -> tuple[int, int, int, int] | None:
    ys = np.flatnonzero(mask.any(axis=1))
    xs = np.flatnonzero(mask.any(axis=0))
    if ys.size == 0:
        return None
    return int(xs[0]), int(ys[0]), int(xs[-1]) + 1, int(ys[-1]) + 1


def grow_line(mask: np.ndarray, seed: Box, gap: int) -> Box | None:
    """Grow a seed box into the full text line it sits on.

    Rows extend while the next row has ink over the current span; columns
    extend while ink appears within ``gap`` pixels of the current edge.
    """
    h, w = mask.shape
    x0, y0 = max(int(math.floor(seed.x_min)), 0), max(int(math.floor(seed.y_min)), 0)
    x1, y1 = min(int(math.ceil(seed.x_max)), w), min(int(math.ceil(seed.y_max)), h)
    sub = mask[y0:y1, x0:x1]
    rows = sub.sum(axis=1)
    if not rows.any():
        return None
    # a tall seed may straddle several lines: keep its heaviest run of inked rows
    edges = np.flatnonzero(np.diff(np.concatenate([[0], (rows > 0).astype(np.int8), [0]])))
    runs = list(zip(edges[0::2].tolist(), edges[1::2].tolist()))
    r0, r1 = max(runs, key=lambda r: (rows[r[0] : r[1]].sum(), -r[0]))
    ext = _ink_extent(sub[r0:r1])
    x0, y0, x1, y1 = x0 + ext[0], y0 + r0, x0 + ext[2], y0 + r1
    while True:
        before = (x0, y0, x1, y1)
        while y0 > 0 and mask[y0 - 1, x0:x1].any():
            y0 -= 1
        while y1 < h and mask[y1, x0:x1].any():
            y1 += 1
        left = np.flatnonzero(mask[y0:y1, max(x0 - gap, 0) : x0].any(axis=0))
        if left.size:
            x0 = max(x0 - gap, 0) + int(left[0])
        right = np.flatnonzero(mask[y0:y1, x1 : x1 + gap].any(axis=0))
        if right.size:
            x1 = x1 + int(right[-1]) + 1
        if (x0, y0, x1, y1) == before:
            return Box(x0, y0, x1, y1)


def detect_text_lines(
    image: RasterImage, proposals: Sequence[ScoredDetection], gap: int = 10
) -> list[Box]:
    """Turn anchor proposals into text-line boxes, ordered top-to-bottom then left-to-right."""
    mask = image.ink_mask()
    free = mask.copy()
    lines: list[Box] = []
    for p in sorted(proposals, key=lambda d: (-d.score, d.box.as_tuple())):
        x0, y0, x1, y1 = (int(v) for v in (math.floor(p.box.x_min), math.floor(p.box.y_min),
                                            math.ceil(p.box.x_max), math.ceil(p.box.y_max)))
        # seeds whose ink already belongs to a line add nothing
        if not free[max(y0, 0) : y1, max(x0, 0) : x1].any():
            continue
        line = grow_line(mask, p.box, gap)
        if line is None:
            continue
        free[int(line.y_min) : int(line.y_max), int(line.x_min) : int(line.x_max)] = False
        lines.append(line)
    merged: list[Box] = []
    for line in sorted(lines, key=lambda b: (b.y_min, b.x_min, b.as_tuple())):
        for i, m in enumerate(merged):
            if min(m.x_max, line.x_max) > max(m.x_min, line.x_min) and min(m.y_max, line.y_max) > max(m.y_min, line.y_min):
                merged[i] = Box(min(m.x_min, line.x_min), min(m.y_min, line.y_min), max(m.x_max, line.x_max), max(m.y_max, line.y_max))
                break
        else:
            merged.append(line)
    return sorted(merged, key=lambda b: (b.y_min, b.x_min))


def cut_chars(image: RasterImage, line: Box) -> list[Box]:
    """Split a text line at blank ink columns; each piece is returned as its tight ink box."""
    x0, y0, x1, y1 = (int(v) for v in (line.x_min, line.y_min, line.x_max, line.y_max))
    mask = image.ink_mask()[y0:y1, x0:x1]
    cols = mask.any(axis=0)
    cuts = []
    edges = np.flatnonzero(np.diff(np.concatenate([[0], cols.astype(np.int8), [0]])))
    for start, stop in zip(edges[0::2], edges[1::2]):
        ext = _ink_extent(mask[:, start:stop])
        if ext is not None:
            cuts.append(Box(x0 + start, y0 + ext[1], x0 + stop, y0 + ext[3]))
    return cuts


class GlyphRecognizer:
    """Classifies a pre-cut character by aligning each glyph's ink box to the cut."""

    def __init__(self, glyphs: GlyphSet, threshold: float = 0.5):
        self.glyphs = glyphs
        self.threshold = threshold
        self._cell_h, self._cell_w = next(iter(glyphs.values())).bitmap.pixels.shape
        self._ink_origin = {c: g.ink_box[:2] for c, g in glyphs.items()}
        kernels = {}
        for c, g in glyphs.items():
            z = g.kernel
            kernels[c] = z / np.sqrt((z * z).sum())
        self._kernels = kernels

    def _score(self, pixels: np.ndarray, cut: Box, charset: Sequence[str]) -> CharDetection | None:
        h, w = self._cell_h, self._cell_w
        best: CharDetection | None = None
        for c in charset:
            if c not in self._kernels:
                continue
            gx0, gy0 = self._ink_origin[c]
            cx, cy = int(cut.x_min) - gx0, int(cut.y_min) - gy0
            # ``pixels`` carries a white margin of one cell on every side
            win = pixels[cy + h : cy + 2 * h, cx + w : cx + 2 * w]
            z = win - win.mean()
            norm = math.sqrt(float((z * z).sum()))
            score = float((z * self._kernels[c]).sum()) / norm if norm > math.sqrt(_FLAT_VARIANCE * h * w) else 0.0
            if best is None or score > best.score:
                best = CharDetection(Box(cx, cy, cx + w, cy + h), c, score)
        if best is None or best.score < self.threshold:
            return None
        return CharDetection(best.position, best.content, min(max(best.score, 0.0), 1.0))

    def _padded(self, image: RasterImage) -> np.ndarray:
        return np.pad(image.pixels, ((self._cell_h,) * 2, (self._cell_w,) * 2), constant_values=1.0)

    def recognize(self, image: RasterImage, cut: Box, charset: Iterable[str]) -> CharDetection | None:
        return self._score(self._padded(image), cut, list(charset))

    def recognize_cuts(self, image: RasterImage, cuts: Iterable[Box], charset: Iterable[str]) -> list[CharDetection]:
        """Recognise every cut; cuts that match no glyph well enough are dropped."""
        charset = list(charset)
        padded = self._padded(image)
        dets = (self._score(padded, cut, charset) for cut in cuts)
        return [d for d in dets if d is not None]

    def read(self, image: RasterImage, region: Box, charset: Iterable[str]) -> list[CharDetection]:
        """Cut ``region`` of ``image`` into characters and recognise each one."""
        return self.recognize_cuts(image, cut_chars(image, region), charset)
