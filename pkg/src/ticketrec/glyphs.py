"""Bitmap glyph vocabulary used by the renderer and the reference detector.

Every glyph is a 5x7 dot pattern drawn at 2x into a fixed 12x20 cell. The
"name" glyphs are stand-ins for a large CJK vocabulary: seeded random dot
patterns labelled with common surname characters.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

from .raster import RasterImage, read_image, write_image

CELL_W = 12
CELL_H = 20
DOT = 2
INK_X0 = 1
INK_Y0 = 3

DIGITS = "0123456789"
UPPER = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
SYMBOLS = ".-:¥"
NAME_CHARS = "王李张刘陈杨黄赵吴周徐孙马朱胡郭何高林罗郑梁谢宋唐许韩冯邓曹"

_FONT: dict[str, str] = {
    "0": ".###. #...# #..## #.#.# ##..# #...# .###.",
    "1": "..#.. .##.. ..#.. ..#.. ..#.. ..#.. .###.",
    "2": ".###. #...# ....# ...#. ..#.. .#... #####",
    "3": ".###. #...# ....# ..##. ....# #...# .###.",
    "4": "...#. ..##. .#.#. #..#. ##### ...#. ...#.",
    "5": "##### #.... ####. ....# ....# #...# .###.",
    "6": "..##. .#... #.... ####. #...# #...# .###.",
    "7": "##### ....# ...#. ..#.. .#... .#... .#...",
    "8": ".###. #...# #...# .###. #...# #...# .###.",
    "9": ".###. #...# #...# .#### ....# ...#. .##..",
    "A": ".###. #...# #...# ##### #...# #...# #...#",
    "B": "####. #...# #...# ####. #...# #...# ####.",
    "C": ".###. #...# #.... #.... #.... #...# .###.",
    "D": "###.. #..#. #...# #...# #...# #..#. ###..",
    "E": "##### #.... #.... ####. #.... #.... #####",
    "F": "##### #.... #.... ####. #.... #.... #....",
    "G": ".###. #...# #.... #.### #...# #...# .####",
    "H": "#...# #...# #...# ##### #...# #...# #...#",
    "I": ".###. ..#.. ..#.. ..#.. ..#.. ..#.. .###.",
    "J": "..### ...#. ...#. ...#. ...#. #..#. .##..",
    "K": "#...# #..#. #.#.. ##... #.#.. #..#. #...#",
    "L": "#.... #.... #.... #.... #.... #.... #####",
    "M": "#...# ##.## #.#.# #.#.# #...# #...# #...#",
    "N": "#...# #...# ##..# #.#.# #..## #...# #...#",
    "O": ".###. #...# #...# #...# #...# #...# .###.",
    "P": "####. #...# #...# ####. #.... #.... #....",
    "Q": ".###. #...# #...# #...# #.#.# #..#. .##.#",
    "R": "####. #...# #...# ####. #.#.. #..#. #...#",
    "S": ".#### #.... #.... .###. ....# ....# ####.",
    "T": "##### ..#.. ..#.. ..#.. ..#.. ..#.. ..#..",
    "U": "#...# #...# #...# #...# #...# #...# .###.",
    "V": "#...# #...# #...# #...# #...# .#.#. ..#..",
    "W": "#...# #...# #...# #.#.# #.#.# #.#.# .#.#.",
    "X": "#...# #...# .#.#. ..#.. .#.#. #...# #...#",
    "Y": "#...# #...# .#.#. ..#.. ..#.. ..#.. ..#..",
    "Z": "##### ....# ...#. ..#.. .#... #.... #####",
    ".": "..... ..... ..... ..... ..... .##.. .##..",
    "-": "..... ..... ..... .###. ..... ..... .....",
    ":": "..... .##.. .##.. ..... .##.. .##.. .....",
    "¥": "#...# .#.#. ..#.. ##### ..#.. ##### ..#..",
}

_NAME_SEED = 2019
_NAME_MAX_SIMILARITY = 0.55


def _dots_from_pattern(pattern: str) -> np.ndarray:
    rows = pattern.split()
    return np.array([[c == "#" for c in row] for row in rows], dtype=bool)


def _cell_from_dots(dots: np.ndarray) -> np.ndarray:
    cell = np.ones((CELL_H, CELL_W))
    ink = np.kron(dots, np.ones((DOT, DOT), dtype=bool))
    h, w = ink.shape
    region = cell[INK_Y0 : INK_Y0 + h, INK_X0 : INK_X0 + w]
    region[ink] = 0.0
    return cell


def _ncc(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt((a * a).sum() * (b * b).sum())
    return float((a * b).sum() / den) if den > 0 else 0.0


def _name_dot_patterns(existing: Iterable[np.ndarray]) -> list[np.ndarray]:
    rng = np.random.default_rng(_NAME_SEED)
    accepted: list[np.ndarray] = []
    cells = [_cell_from_dots(d) for d in existing]
    while len(accepted) < len(NAME_CHARS):
        dots = rng.random((7, 5)) < 0.5
        # full-width, full-height blocks keep the glyph's cut box identical to its cell
        if not (dots[:, 0].any() and dots[:, -1].any() and dots[0].any() and dots[-1].any()):
            continue
        if not dots.any(axis=0).all():
            continue
        cell = _cell_from_dots(dots)
        if all(_ncc(cell, other) < _NAME_MAX_SIMILARITY for other in cells):
            accepted.append(dots)
            cells.append(cell)
    return accepted


@dataclass(frozen=True)
class GlyphTemplate:
    content: str
    bitmap: RasterImage

    @property
    def kernel(self) -> np.ndarray:
        """Zero-mean copy of the bitmap, the form used for correlation scoring."""
        px = self.bitmap.pixels
        return px - px.mean()

    @property
    def ink_box(self) -> tuple[int, int, int, int]:
        """Tight ``(x0, y0, x1, y1)`` ink extent inside the cell, exclusive max."""
        mask = self.bitmap.ink_mask()
        ys = np.flatnonzero(mask.any(axis=1))
        xs = np.flatnonzero(mask.any(axis=0))
        return int(xs[0]), int(ys[0]), int(xs[-1]) + 1, int(ys[-1]) + 1


class GlyphSet(Mapping[str, GlyphTemplate]):
    """An ordered, immutable character-class -> template mapping."""

    def __init__(self, glyphs: Iterable[GlyphTemplate]):
        self._glyphs: dict[str, GlyphTemplate] = {}
        for g in glyphs:
            if g.content in self._glyphs:
                raise ValueError(f"duplicate glyph {g.content!r}")
            self._glyphs[g.content] = g
        shapes = {g.bitmap.pixels.shape for g in self._glyphs.values()}
        if len(shapes) > 1:
            raise ValueError(f"glyph cells differ in size: {sorted(shapes)}")

    def __getitem__(self, key: str) -> GlyphTemplate:
        return self._glyphs[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._glyphs)

    def __len__(self) -> int:
        return len(self._glyphs)

    @property
    def cell_size(self) -> tuple[int, int]:
        h, w = next(iter(self._glyphs.values())).bitmap.pixels.shape
        return w, h

    def subset(self, chars: Iterable[str]) -> "GlyphSet":
        missing = [c for c in chars if c not in self._glyphs]
        if missing:
            raise KeyError(f"glyphs not in vocabulary: {''.join(missing)!r}")
        keep = set(chars)
        return GlyphSet(g for c, g in self._glyphs.items() if c in keep)

    def save(self, directory: str | Path) -> None:
        """Write one PGM per glyph, named by the character's code point."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for c, g in self._glyphs.items():
            write_image(g.bitmap, directory / f"U+{ord(c):04X}.pgm")

    @classmethod
    def load(cls, directory: str | Path) -> "GlyphSet":
        directory = Path(directory)
        files = sorted(directory.glob("U+*.pgm"))
        if not files:
            raise FileNotFoundError(f"no glyph bitmaps in {directory}")
        return cls(GlyphTemplate(chr(int(f.stem[2:], 16)), read_image(f)) for f in files)


@lru_cache(maxsize=1)
def default_glyphs() -> GlyphSet:
    base = [(c, _dots_from_pattern(p)) for c, p in _FONT.items()]
    names = _name_dot_patterns(d for _, d in base)
    glyphs = [GlyphTemplate(c, RasterImage(_cell_from_dots(d))) for c, d in base]
    glyphs += [GlyphTemplate(c, RasterImage(_cell_from_dots(d))) for c, d in zip(NAME_CHARS, names)]
    return GlyphSet(glyphs)



def render_text(text: str, glyphs: GlyphSet | None = None) -> np.ndarray:
    """Pixels of ``text`` set on the fixed cell pitch; spaces leave blank cells."""
    glyphs = glyphs or default_glyphs()
    w, h = glyphs.cell_size
    out = np.ones((h, w * max(len(text), 1)))
    for i, c in enumerate(text):
        if c != " ":
            out[:, i * w : (i + 1) * w] = glyphs[c].bitmap.pixels
    return out
