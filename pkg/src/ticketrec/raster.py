"""Grayscale raster images and PGM/PNG I/O.

Intensities are floats in [0, 1] with 1.0 as white background and 0.0 as ink.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

INK_LEVEL = 0.5


@dataclass(frozen=True, eq=False)
class RasterImage:
    """Row-major grayscale image, read-only after construction."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.pixels, dtype=np.float64, copy=True)
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError(f"expected a nonempty 2-D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("pixels must be finite")
        arr = np.clip(arr, 0.0, 1.0)
        arr.setflags(write=False)
        object.__setattr__(self, "pixels", arr)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @classmethod
    def blank(cls, width: int, height: int, value: float = 1.0) -> "RasterImage":
        return cls(np.full((height, width), value))

    def crop(self, x0: int, y0: int, x1: int, y1: int, fill: float = 1.0) -> "RasterImage":
        """Crop ``[x0, x1) x [y0, y1)``; out-of-bounds parts are filled with ``fill``."""
        if x1 <= x0 or y1 <= y0:
            raise ValueError("empty crop")
        out = np.full((y1 - y0, x1 - x0), fill)
        sx0, sy0 = max(x0, 0), max(y0, 0)
        sx1, sy1 = min(x1, self.width), min(y1, self.height)
        if sx1 > sx0 and sy1 > sy0:
            out[sy0 - y0 : sy1 - y0, sx0 - x0 : sx1 - x0] = self.pixels[sy0:sy1, sx0:sx1]
        return RasterImage(out)

    def ink_mask(self) -> np.ndarray:
        return self.pixels < INK_LEVEL

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RasterImage):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and bool(np.array_equal(self.pixels, other.pixels))

    __hash__ = None  # type: ignore[assignment]


def to_uint8(image: RasterImage) -> np.ndarray:
    return np.rint(image.pixels * 255.0).astype(np.uint8)


def write_image(image: RasterImage, path: str | Path) -> None:
    """Write as 8-bit grayscale; format follows the suffix (``.pgm`` is P5)."""
    path = Path(path)
    Image.fromarray(to_uint8(image)).save(path, format="PPM" if path.suffix == ".pgm" else None)


def read_image(path: str | Path) -> RasterImage:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    return RasterImage(arr)
