"""Structured ticket information: keyword regions, characters, assembled values.

A recognised ticket is a mapping from keyword class (invoice code, date,
amount, ...) to the string read inside that keyword's region, together with
every character's box and score.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

from .geometry import Box
from .glyphs import DIGITS, NAME_CHARS, UPPER


class TicketClass(str, Enum):
    I_A = "I-A"
    I_B = "I-B"
    II = "II"


class KeywordClass(str, Enum):
    """Closed keyword registry. Declaration order is the serialisation order."""

    INVOICE_CODE = "invoice-code"
    INVOICE_NUMBER = "invoice-number"
    DATE = "date"
    AMOUNT = "amount"
    VERIFICATION_CODE = "verification-code"
    TRAIN_NUMBER = "train-number"
    NAME = "name"
    ACCOUNT = "account"
    REFERENCE = "reference"

    @property
    def pattern(self) -> re.Pattern | None:
        return _PATTERNS.get(self)

    @property
    def charset(self) -> str:
        return _CHARSETS[self]


TRAIN_LETTERS = "GDCZ"

_PATTERNS: dict[KeywordClass, re.Pattern] = {
    KeywordClass.INVOICE_CODE: re.compile(r"\d{10,12}"),
    KeywordClass.INVOICE_NUMBER: re.compile(r"\d{8}"),
    KeywordClass.DATE: re.compile(r"\d{4}-\d{2}-\d{2}"),
    KeywordClass.AMOUNT: re.compile(r"¥?\d+(\.\d+)?"),
    KeywordClass.VERIFICATION_CODE: re.compile(r"\d+"),
    KeywordClass.TRAIN_NUMBER: re.compile(rf"[{TRAIN_LETTERS}]\d{{1,4}}"),
    KeywordClass.NAME: re.compile(rf"[{NAME_CHARS}]+"),
    KeywordClass.ACCOUNT: re.compile(r"\d+"),
    KeywordClass.REFERENCE: re.compile(r"[A-Z0-9]+"),
}

_CHARSETS: dict[KeywordClass, str] = {
    KeywordClass.INVOICE_CODE: DIGITS,
    KeywordClass.INVOICE_NUMBER: DIGITS,
    KeywordClass.DATE: DIGITS + "-",
    KeywordClass.AMOUNT: DIGITS + ".¥",
    KeywordClass.VERIFICATION_CODE: DIGITS,
    KeywordClass.TRAIN_NUMBER: DIGITS + TRAIN_LETTERS,
    KeywordClass.NAME: NAME_CHARS,
    KeywordClass.ACCOUNT: DIGITS,
    KeywordClass.REFERENCE: DIGITS + UPPER,
}


@dataclass(frozen=True)
class KeywordRegion:
    keyword: KeywordClass
    box: Box
    score: float

    def __post_init__(self) -> None:
        if self.box.w <= 0 or self.box.h <= 0:
            raise ValueError(f"keyword region needs a positive-area box: {self.box}")


@dataclass(frozen=True)
class CharDetection:
    position: Box
    content: str
    score: float


@dataclass(frozen=True)
class FieldValue:
    text: str
    char_boxes: tuple[Box, ...] = ()
    char_scores: tuple[float, ...] = ()
    line_breaks: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if not (len(self.text) == len(self.char_boxes) == len(self.char_scores)):
            raise ValueError("text, char_boxes and char_scores must have equal length")

    @property
    def mean_score(self) -> float:
        return sum(self.char_scores) / len(self.char_scores) if self.char_scores else 0.0


@dataclass(frozen=True)
class RecognitionResult:
    source_id: str
    ticket_class: TicketClass
    entries: Mapping[KeywordClass, FieldValue] = field(default_factory=dict)
    warnings: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        ordered = {k: self.entries[k] for k in KeywordClass if k in self.entries}
        object.__setattr__(self, "entries", ordered)

    def texts(self) -> dict[str, str]:
        return {k.value: v.text for k, v in self.entries.items()}

    def to_dict(self) -> dict:
        return {
            "source_id": self.source_id,
            "ticket_class": self.ticket_class.value,
            "warnings": list(self.warnings),
            "entries": [
                {
                    "keyword": k.value,
                    "text": v.text,
                    "mean_score": round(v.mean_score, 6),
                    "line_breaks": list(v.line_breaks),
                    "chars": [
                        {"char": c, "box": list(b.as_tuple()), "score": round(s, 6)}
                        for c, b, s in zip(v.text, v.char_boxes, v.char_scores)
                    ],
                }
                for k, v in self.entries.items()
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "RecognitionResult":
        entries = {}
        for e in d["entries"]:
            chars = e["chars"]
            entries[KeywordClass(e["keyword"])] = FieldValue(
                "".join(c["char"] for c in chars),
                tuple(Box(*c["box"]) for c in chars),
                tuple(float(c["score"]) for c in chars),
                tuple(e.get("line_breaks", ())),
            )
        return cls(d["source_id"], TicketClass(d["ticket_class"]), entries, tuple(d.get("warnings", ())))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, sort_keys=False)

    def to_records(self) -> list[str]:
        """Line-oriented, tab-separated form: one ``ticket`` line, then one
        ``field`` line and its ``char`` lines per entry."""
        lines = [f"ticket\t{self.source_id}\t{self.ticket_class.value}"]
        for k, v in self.entries.items():
            lines.append(f"field\t{k.value}\t{v.text}\t{v.mean_score:.6f}")
            for c, b, s in zip(v.text, v.char_boxes, v.char_scores):
                coords = "\t".join(f"{x:g}" for x in b.as_tuple())
                lines.append(f"char\t{k.value}\t{c}\t{coords}\t{s:.6f}")
        return lines


def _vertical_overlap(a0: float, a1: float, b0: float, b1: float) -> float:
    return max(0.0, min(a1, b1) - max(a0, b0))


def assemble_value(chars: Iterable[CharDetection], roi_box: Box, line_overlap: float = 0.5) -> FieldValue:
    """Read characters in lines top-to-bottom, each line left-to-right.

    A character joins a line when their vertical overlap is at least
    ``line_overlap`` of the smaller of the two heights. Boxes are shifted from
    ROI-local to document coordinates.
    """
    canonical = sorted(chars, key=lambda c: (c.position.y_min, c.position.x_min, c.position.as_tuple(), c.content, c.score))
    lines: list[list[CharDetection]] = []
    extents: list[list[float]] = []
    for ch in canonical:
        p = ch.position
        for members, ext in zip(lines, extents):
            need = line_overlap * min(p.h, ext[1] - ext[0])
            if _vertical_overlap(p.y_min, p.y_max, ext[0], ext[1]) >= need and need > 0:
                members.append(ch)
                ext[0], ext[1] = min(ext[0], p.y_min), max(ext[1], p.y_max)
                break
        else:
            lines.append([ch])
            extents.append([p.y_min, p.y_max])

    ordered_lines = sorted(zip(extents, lines), key=lambda el: (el[0][0], el[0][1]))
    text: list[str] = []
    boxes: list[Box] = []
    scores: list[float] = []
    breaks: list[int] = []
    for _, members in ordered_lines:
        if text:
            breaks.append(len(text))
        for ch in sorted(members, key=lambda c: (c.position.x_min, c.position.as_tuple(), c.content, c.score)):
            text.append(ch.content)
            boxes.append(ch.position.translate(roi_box.x_min, roi_box.y_min))
            scores.append(ch.score)
    return FieldValue("".join(text), tuple(boxes), tuple(scores), tuple(breaks))


def assemble_ticket(
    regions: Sequence[KeywordRegion],
    chars_per_region: Mapping[int, Sequence[CharDetection]],
    source_id: str = "",
    ticket_class: TicketClass = TicketClass.I_A,
    warnings: Sequence[str] = (),
) -> RecognitionResult:
    """Combine per-region readings; for a repeated keyword the higher-scoring region wins."""
    bad = [i for i in chars_per_region if not 0 <= i < len(regions)]
    if bad:
        raise IndexError(f"character lists refer to missing regions: {bad}")
    winners: dict[KeywordClass, int] = {}
    for i, r in enumerate(regions):
        j = winners.get(r.keyword)
        if j is None or r.score > regions[j].score:
            winners[r.keyword] = i
    entries = {k: assemble_value(chars_per_region.get(i, ()), regions[i].box) for k, i in winners.items()}
    return RecognitionResult(source_id, ticket_class, entries, tuple(warnings))


class Verdict(str, Enum):
    OK = "ok"
    PATTERN_MISMATCH = "pattern-mismatch"


def validate_field(keyword: KeywordClass, value: FieldValue | str) -> Verdict:
    text = value.text if isinstance(value, FieldValue) else value
    pattern = keyword.pattern
    if pattern is None:
        return Verdict.OK
    return Verdict.OK if pattern.fullmatch(text) else Verdict.PATTERN_MISMATCH
