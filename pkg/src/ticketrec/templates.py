"""Ticket templates and the template registry file.

Fixed-form templates pin every field to a value box with a printed caption
to its left. Free-form templates only declare which captioned fields may
appear; their layout changes from ticket to ticket.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterator, Mapping

from .geometry import Box
from .glyphs import CELL_H, CELL_W, DIGITS, SYMBOLS, UPPER
from .ticket_model import KeywordClass

PITCH = CELL_W
FIELD_PAD = 4
LABEL_GAP = 12

# characters the direct detector handles without a separate recognition model
DIRECT_VOCABULARY = DIGITS + UPPER + SYMBOLS

FORMS = ("fixed", "free")
VOCABULARIES = ("simple", "complex")


class RegistryError(ValueError):
    pass


class UnknownTemplateError(KeyError):
    pass


@dataclass(frozen=True)
class FieldSpec:
    keyword: KeywordClass
    label: str
    length: int
    at: tuple[int, int] | None = None
    charset: str = ""

    def __post_init__(self) -> None:
        if not self.charset:
            object.__setattr__(self, "charset", self.keyword.charset)

    @property
    def needs_recognition(self) -> bool:
        """True when the field's characters go beyond the direct-detection vocabulary."""
        return any(c not in DIRECT_VOCABULARY for c in self.charset)

    @property
    def box(self) -> Box:
        if self.at is None:
            raise ValueError(f"free-form field {self.keyword.value} has no fixed box")
        x, y = self.at
        return Box(x, y, x + self.length * PITCH + 2 * FIELD_PAD, y + CELL_H + 2 * FIELD_PAD)

    @property
    def label_box(self) -> Box:
        """Cells occupied by the printed caption, used as the field's landmark."""
        b = self.box
        x0 = b.x_min - LABEL_GAP - len(self.label) * PITCH
        y0 = b.y_min + FIELD_PAD
        return Box(x0, y0, x0 + len(self.label) * PITCH, y0 + CELL_H)

    def char_origin(self, index: int) -> tuple[int, int]:
        x, y = self.at  # type: ignore[misc]
        return x + FIELD_PAD + index * PITCH, y + FIELD_PAD


@dataclass(frozen=True)
class TicketTemplate:
    id: str
    title: str
    form: str
    vocabulary: str
    resolution: tuple[int, int]
    fields: tuple[FieldSpec, ...]

    @property
    def width(self) -> int:
        return self.resolution[0]

    @property
    def height(self) -> int:
        return self.resolution[1]

    @property
    def fixed(self) -> bool:
        return self.form == "fixed"

    def field(self, keyword: KeywordClass) -> FieldSpec:
        for f in self.fields:
            if f.keyword == keyword:
                return f
        raise KeyError(keyword)

    def validate(self) -> None:
        if self.form not in FORMS:
            raise RegistryError(f"{self.id}: form must be one of {FORMS}, got {self.form!r}")
        if self.vocabulary not in VOCABULARIES:
            raise RegistryError(f"{self.id}: vocabulary must be one of {VOCABULARIES}, got {self.vocabulary!r}")
        if not self.fields:
            raise RegistryError(f"{self.id}: template declares no fields")
        keywords = [f.keyword for f in self.fields]
        if len(set(keywords)) != len(keywords):
            raise RegistryError(f"{self.id}: duplicate keyword fields")
        labels = [f.label for f in self.fields]
        if len(set(labels)) != len(labels):
            raise RegistryError(f"{self.id}: duplicate field captions")
        for f in self.fields:
            bad = [c for c in f.label if c not in UPPER]
            if bad or not f.label:
                raise RegistryError(f"{self.id}.{f.keyword.value}: captions must be uppercase letters")
        complex_fields = [f for f in self.fields if f.needs_recognition]
        if (self.vocabulary == "complex") != bool(complex_fields):
            raise RegistryError(
                f"{self.id}: vocabulary={self.vocabulary} but large-vocabulary fields are "
                f"{[f.keyword.value for f in complex_fields]}"
            )
        if not self.fixed:
            return
        frame = Box(0, 0, self.width, self.height)
        boxes = []
        for f in self.fields:
            if f.at is None:
                raise RegistryError(f"{self.id}.{f.keyword.value}: fixed-form field needs 'at'")
            for b in (f.box, f.label_box):
                if not frame.contains(b):
                    raise RegistryError(f"{self.id}.{f.keyword.value}: {b} outside {self.resolution}")
            boxes += [f.box, f.label_box]
        for i, a in enumerate(boxes):
            for b in boxes[i + 1 :]:
                if min(a.x_max, b.x_max) > max(a.x_min, b.x_min) and min(a.y_max, b.y_max) > max(a.y_min, b.y_min):
                    raise RegistryError(f"{self.id}: overlapping field layout {a} / {b}")


class TemplateRegistry(Mapping[str, TicketTemplate]):
    def __init__(self, templates: Mapping[str, TicketTemplate] | None = None):
        self._templates = dict(templates or {})
        for t in self._templates.values():
            t.validate()

    def __getitem__(self, key: str) -> TicketTemplate:
        try:
            return self._templates[key]
        except KeyError:
            raise UnknownTemplateError(key) from None

    def __iter__(self) -> Iterator[str]:
        return iter(self._templates)

    def __len__(self) -> int:
        return len(self._templates)


def _ints(text: str, n: int, what: str) -> tuple[int, ...]:
    parts = text.split()
    if len(parts) != n:
        raise RegistryError(f"{what}: expected {n} integers, got {text!r}")
    return tuple(int(p) for p in parts)


def parse_registry(text: str, source: str = "<string>") -> TemplateRegistry:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise RegistryError(str(exc)) from exc
    templates: dict[str, TicketTemplate] = {}
    try:
        for section in cp.sections():
            if not section.startswith("template "):
                continue
            tid = section.split(None, 1)[1].strip()
            sec = cp[section]
            fields = []
            for kw in sec["fields"].split():
                fsec = cp[f"field {tid}.{kw}"]
                at = _ints(fsec["at"], 2, f"{tid}.{kw}.at") if "at" in fsec else None
                fields.append(
                    FieldSpec(KeywordClass(kw), fsec["label"], int(fsec["length"]), at, fsec.get("charset", ""))
                )
            templates[tid] = TicketTemplate(
                tid,
                sec.get("title", ""),
                sec["form"],
                sec["vocabulary"],
                _ints(sec["resolution"], 2, f"{tid}.resolution"),  # type: ignore[arg-type]
                tuple(fields),
            )
    except (KeyError, ValueError) as exc:
        if isinstance(exc, RegistryError):
            raise
        raise RegistryError(f"{source}: {exc}") from exc
    return TemplateRegistry(templates)


def load_registry(path: str | Path | None = None) -> TemplateRegistry:
    """Load a registry file, or the packaged default when ``path`` is None."""
    if path is None:
        text = resources.files("ticketrec").joinpath("data/templates.ini").read_text(encoding="utf-8")
        return parse_registry(text, "templates.ini")
    path = Path(path)
    return parse_registry(path.read_text(encoding="utf-8"), str(path))
