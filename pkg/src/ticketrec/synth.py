"""Synthetic ticket rendering and corpus generation with planted ground truth.

Fixed-form tickets put each value at its template position with the caption
to its left. Free-form tickets print one ``CAPTION:VALUE`` line per field at a
seeded random position, so only the set of fields is known in advance.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .geometry import Box
from .glyphs import CELL_H, CELL_W, DIGITS, NAME_CHARS, UPPER, GlyphSet, default_glyphs
from .raster import RasterImage, read_image, write_image
from .templates import PITCH, TemplateRegistry, TicketTemplate
from .ticket_model import TRAIN_LETTERS, KeywordClass, TicketClass

DEFAULT_MIX = (0.6827, 0.3173)
MAX_SIGMA = 0.1
MAX_SHIFT = 8
TITLE_Y = 40

MANIFEST_COLUMNS = ("id", "template", "class", "seed", "sigma", "dx", "dy")


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float = 0.0
    dx: int = 0
    dy: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.sigma <= MAX_SIGMA:
            raise ValueError(f"sigma must lie in [0, {MAX_SIGMA}], got {self.sigma}")
        if max(abs(self.dx), abs(self.dy)) > MAX_SHIFT:
            raise ValueError(f"translation must be at most {MAX_SHIFT} px, got ({self.dx}, {self.dy})")


NO_NOISE = NoiseSpec()


@dataclass(frozen=True)
class TruthField:
    text: str
    char_boxes: tuple[Box, ...]
    box: Box


@dataclass(frozen=True)
class GroundTruth:
    template_id: str
    ticket_class: TicketClass
    fields: Mapping[KeywordClass, TruthField] = field(default_factory=dict)

    def texts(self) -> dict[str, str]:
        return {k.value: f.text for k, f in self.fields.items()}

    def char_boxes(self) -> list[tuple[Box, str]]:
        return [(b, c) for f in self.fields.values() for c, b in zip(f.text, f.char_boxes)]


def ticket_class_of(template: TicketTemplate) -> TicketClass:
    if not template.fixed:
        return TicketClass.II
    return TicketClass.I_B if template.vocabulary == "complex" else TicketClass.I_A


def _digits(rng: np.random.Generator, n: int) -> str:
    return "".join(rng.choice(list(DIGITS), n))


def sample_value(keyword: KeywordClass, length: int, rng: np.random.Generator) -> str:
    """Draw a value matching the keyword's pattern and fitting ``length`` cells."""
    if keyword is KeywordClass.INVOICE_CODE:
        return _digits(rng, int(rng.integers(10, min(12, length) + 1)))
    if keyword is KeywordClass.INVOICE_NUMBER:
        return _digits(rng, 8)
    if keyword is KeywordClass.DATE:
        y, m, d = rng.integers(2015, 2022), rng.integers(1, 13), rng.integers(1, 29)
        return f"{y:04d}-{m:02d}-{d:02d}"
    if keyword is KeywordClass.AMOUNT:
        prefix = "¥" if rng.random() < 0.5 else ""
        whole = str(int(rng.integers(1, 10 ** int(rng.integers(1, 6)))))
        frac = "." + _digits(rng, 2) if rng.random() < 0.7 else ""
        return prefix + whole + frac
    if keyword is KeywordClass.TRAIN_NUMBER:
        digits = int(rng.integers(1, min(4, length - 1) + 1))
        return str(rng.choice(list(TRAIN_LETTERS))) + str(int(rng.integers(1, 10**digits)))
    if keyword is KeywordClass.NAME:
        return "".join(rng.choice(list(NAME_CHARS), int(rng.integers(2, min(4, length) + 1))))
    if keyword is KeywordClass.REFERENCE:
        return "".join(rng.choice(list(DIGITS + UPPER), int(rng.integers(6, length + 1))))
    # verification-code, account: full-length digit strings
    return _digits(rng, length)


class _Canvas:
    def __init__(self, width: int, height: int, glyphs: GlyphSet):
        self.pixels = np.ones((height, width))
        self.glyphs = glyphs

    def text(self, s: str, x: int, y: int) -> list[Box]:
        boxes = []
        for i, c in enumerate(s):
            if c != " ":
                cx = x + i * PITCH
                cell = self.pixels[y : y + CELL_H, cx : cx + CELL_W]
                if cell.shape != (CELL_H, CELL_W):
                    raise ValueError(f"glyph {c!r} at ({cx}, {y}) falls outside the page")
                np.minimum(cell, self.glyphs[c].bitmap.pixels, out=cell)
                boxes.append(Box(cx, y, cx + CELL_W, y + CELL_H))
        return boxes


def _title_x(template: TicketTemplate) -> int:
    return (template.width - len(template.title) * PITCH) // 2


def render_ticket(
    template: TicketTemplate, seed: int, noise: NoiseSpec = NO_NOISE, glyphs: GlyphSet | None = None
) -> tuple[RasterImage, GroundTruth]:
    glyphs = glyphs or default_glyphs()
    rng = np.random.default_rng(seed)
    values = {f.keyword: sample_value(f.keyword, f.length, rng) for f in template.fields}
    canvas = _Canvas(template.width, template.height, glyphs)
    dx, dy = noise.dx, noise.dy
    truth: dict[KeywordClass, TruthField] = {}
    if template.title:
        canvas.text(template.title, _title_x(template) + dx, TITLE_Y + dy)

    if template.fixed:
        for f in template.fields:
            lb = f.label_box
            canvas.text(f.label, int(lb.x_min) + dx, int(lb.y_min) + dy)
            x, y = f.char_origin(0)
            boxes = canvas.text(values[f.keyword], x + dx, y + dy)
            truth[f.keyword] = TruthField(values[f.keyword], tuple(boxes), f.box.translate(dx, dy))
    else:
        order = rng.permutation(len(template.fields))
        y = TITLE_Y + 60 + int(rng.integers(0, 40))
        for i in order:
            f = template.fields[i]
            x = int(rng.integers(40, 160))
            line = f"{f.label}:{values[f.keyword]}"
            if x + len(line) * PITCH > template.width - 16 or y + CELL_H > template.height - 16:
                raise ValueError(f"template {template.id} too small for its free-form lines")
            boxes = canvas.text(line, x + dx, y + dy)[len(f.label) + 1 :]
            span = Box(boxes[0].x_min, boxes[0].y_min, boxes[-1].x_max, boxes[-1].y_max)
            truth[f.keyword] = TruthField(values[f.keyword], tuple(boxes), span)
            y += int(rng.integers(40, 71))

    pixels = canvas.pixels
    if noise.sigma > 0:
        noise_rng = np.random.default_rng([seed, 1])
        pixels = pixels + noise_rng.normal(0.0, noise.sigma, pixels.shape)
    ordered = {k: truth[k] for k in KeywordClass if k in truth}
    gt = GroundTruth(template.id, ticket_class_of(template), ordered)
    return RasterImage(pixels), gt


def largest_remainder(total: int, proportions: Sequence[float]) -> list[int]:
    """Split ``total`` into integer parts proportional to ``proportions``."""
    if total < 0:
        raise ValueError("total must be >= 0")
    p = np.asarray(proportions, dtype=float)
    if p.size == 0 or np.any(p < 0) or not np.isclose(p.sum(), 1.0, atol=1e-9):
        raise ValueError(f"mix proportions must be nonnegative and sum to 1, got {list(proportions)}")
    quotas = p * total
    parts = np.floor(quotas).astype(int)
    short = total - int(parts.sum())
    # stable on ties: earlier parts win
    for i in sorted(range(p.size), key=lambda i: (-(quotas[i] - parts[i]), i))[:short]:
        parts[i] += 1
    return parts.tolist()


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    template: str
    ticket_class: str
    seed: int
    sigma: float
    dx: int
    dy: int

    def row(self) -> list[str]:
        return [self.id, self.template, self.ticket_class, str(self.seed), f"{self.sigma:g}", str(self.dx), str(self.dy)]

    @property
    def noise(self) -> NoiseSpec:
        return NoiseSpec(self.sigma, self.dx, self.dy)


def plan_corpus(
    registry: TemplateRegistry,
    count: int,
    seed: int,
    mix: Sequence[float] = DEFAULT_MIX,
    template_ids: Iterable[str] | None = None,
    sigma: float = 0.0,
    max_shift: int = 0,
) -> list[ManifestEntry]:
    """Decide every ticket's template, seed and noise without rendering anything."""
    ids = list(template_ids) if template_ids is not None else list(registry)
    templates = [registry[t] for t in ids]
    fixed = [t for t in templates if t.fixed]
    free = [t for t in templates if not t.fixed]
    n_fixed, n_free = largest_remainder(count, mix)
    if (n_fixed and not fixed) or (n_free and not free):
        raise ValueError("mix requests a ticket family with no selected template")
    if not 0 <= max_shift <= MAX_SHIFT:
        raise ValueError(f"max_shift must lie in [0, {MAX_SHIFT}]")
    NoiseSpec(sigma)
    chosen = [fixed[i % len(fixed)] for i in range(n_fixed)] + [free[i % len(free)] for i in range(n_free)]
    entries = []
    for index, t in enumerate(chosen):
        rng = np.random.default_rng([seed, index])
        ticket_seed = int(rng.integers(0, 2**31 - 1))
        dx, dy = (int(v) for v in rng.integers(-max_shift, max_shift + 1, 2))
        entries.append(ManifestEntry(f"t{index:05d}", t.id, ticket_class_of(t).value, ticket_seed, float(sigma), dx, dy))
    return entries


def write_truth(gt: GroundTruth, path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        for k, f in gt.fields.items():
            for c, b in zip(f.text, f.char_boxes):
                w.writerow([k.value, c, *(int(v) for v in b.as_tuple())])


def read_truth(path: Path) -> dict[KeywordClass, tuple[str, tuple[Box, ...]]]:
    chars: dict[KeywordClass, list[tuple[str, Box]]] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.reader(fh, delimiter="\t"):
            if not row:
                continue
            kw, c, *coords = row
            chars.setdefault(KeywordClass(kw), []).append((c, Box(*(float(v) for v in coords))))
    return {k: ("".join(c for c, _ in v), tuple(b for _, b in v)) for k, v in chars.items()}


def write_manifest(entries: Sequence[ManifestEntry], path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for e in entries:
            w.writerow(e.row())


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header is None or tuple(header) != MANIFEST_COLUMNS:
            raise ValueError(f"{path}: bad manifest header {header}")
        return [
            ManifestEntry(r[0], r[1], r[2], int(r[3]), float(r[4]), int(r[5]), int(r[6])) for r in reader if r
        ]


def generate_corpus(
    registry: TemplateRegistry,
    out_dir: str | Path,
    count: int,
    seed: int,
    mix: Sequence[float] = DEFAULT_MIX,
    template_ids: Iterable[str] | None = None,
    sigma: float = 0.0,
    max_shift: int = 0,
    glyphs: GlyphSet | None = None,
) -> list[ManifestEntry]:
    """Render a corpus into ``out_dir`` (images/, truth/, manifest.tsv)."""
    entries = plan_corpus(registry, count, seed, mix, template_ids, sigma, max_shift)
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "truth").mkdir(exist_ok=True)
    for e in entries:
        image, gt = render_ticket(registry[e.template], e.seed, e.noise, glyphs)
        write_image(image, out / "images" / f"{e.id}.pgm")
        write_truth(gt, out / "truth" / f"{e.id}.tsv")
    write_manifest(entries, out / "manifest.tsv")
    return entries


def load_ticket_image(corpus_dir: str | Path, ticket_id: str) -> RasterImage:
    return read_image(Path(corpus_dir) / "images" / f"{ticket_id}.pgm")
