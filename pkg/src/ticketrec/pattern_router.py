"""Ticket-type routing and the staged recognition pipeline.

A ticket's class comes from its template: fixed layout with a small
vocabulary, fixed layout with large-vocabulary fields, or free layout. Each
class has a fixed stage plan, and ``execute_pipeline`` runs exactly that plan.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Mapping

from .anchors import AnchorSpec, generate_anchors
from .detector import (
    CHAR_STAGE,
    REGION_STAGE,
    SEARCH_RADIUS,
    DetectorStage,
    GlyphRecognizer,
    cut_chars,
    detect_chars,
    detect_regions,
    detect_text_lines,
    propose_text_regions,
)
from .geometry import Box, area
from .glyphs import SYMBOLS, UPPER, GlyphSet, default_glyphs
from .raster import RasterImage
from .synth import ticket_class_of
from .templates import TemplateRegistry, TicketTemplate
from .ticket_model import (
    CharDetection,
    KeywordRegion,
    RecognitionResult,
    TicketClass,
    assemble_ticket,
)


class Stage(str, Enum):
    REGION_DETECTION = "region-detection"
    CHAR_DETECTION = "char-detection"
    CHAR_RECOGNITION = "char-recognition"
    FULL_SURFACE_DETECTION = "full-surface-detection"
    CHAR_LEVEL_CUT = "char-level-cut"
    ASSEMBLY = "assembly"


ENTRY_STAGES = frozenset({Stage.REGION_DETECTION, Stage.FULL_SURFACE_DETECTION})


@dataclass(frozen=True)
class PipelinePlan:
    stages: tuple[Stage, ...]

    def __post_init__(self) -> None:
        if not self.stages or self.stages[-1] is not Stage.ASSEMBLY:
            raise ValueError("a plan must end with assembly")
        entries = [s for s in self.stages if s in ENTRY_STAGES]
        if len(entries) != 1 or self.stages[0] is not entries[0]:
            raise ValueError("a plan must start with its single detection entry point")

    def names(self) -> list[str]:
        return [s.value for s in self.stages]


_PLANS = {
    TicketClass.I_A: PipelinePlan((Stage.REGION_DETECTION, Stage.CHAR_DETECTION, Stage.ASSEMBLY)),
    TicketClass.I_B: PipelinePlan(
        (Stage.REGION_DETECTION, Stage.CHAR_DETECTION, Stage.CHAR_RECOGNITION, Stage.ASSEMBLY)
    ),
    TicketClass.II: PipelinePlan(
        (Stage.FULL_SURFACE_DETECTION, Stage.CHAR_LEVEL_CUT, Stage.CHAR_RECOGNITION, Stage.ASSEMBLY)
    ),
}

PATTERN_OF = {TicketClass.I_A: "I", TicketClass.I_B: "II", TicketClass.II: "III"}


def classify_ticket(template_id: str, registry: TemplateRegistry) -> TicketClass:
    return ticket_class_of(registry[template_id])


def plan_for(ticket_class: TicketClass) -> PipelinePlan:
    return _PLANS[TicketClass(ticket_class)]


@dataclass(frozen=True)
class PipelineSettings:
    region_threshold: float = REGION_STAGE.threshold
    char_threshold: float = CHAR_STAGE.threshold
    recognition_threshold: float = 0.5
    proposal_threshold: float = 0.1
    standard_iou: float = 0.5
    lucnms_iou: float = 0.5
    char_nms: str = "lucnms"
    search_radius: int = SEARCH_RADIUS
    line_gap: int = 10
    anchor_spec: AnchorSpec = field(default_factory=AnchorSpec)

    def __post_init__(self) -> None:
        for name in ("region_threshold", "char_threshold", "recognition_threshold", "proposal_threshold",
                     "standard_iou", "lucnms_iou"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {getattr(self, name)}")

    @property
    def region_stage(self) -> DetectorStage:
        return DetectorStage("region", self.region_threshold, "standard", self.standard_iou)

    @property
    def char_stage(self) -> DetectorStage:
        iou = self.lucnms_iou if self.char_nms == "lucnms" else self.standard_iou
        return DetectorStage("character", self.char_threshold, self.char_nms, iou)


@dataclass(frozen=True)
class Models:
    """Glyph vocabulary for direct detection plus the optional recognition model."""

    glyphs: GlyphSet
    recognizer: GlyphRecognizer | None

    @classmethod
    def reference(cls, glyphs: GlyphSet | None = None, recognition: bool = True,
                  recognition_threshold: float = 0.5) -> "Models":
        glyphs = glyphs or default_glyphs()
        return cls(glyphs, GlyphRecognizer(glyphs, recognition_threshold) if recognition else None)


class PipelineError(RuntimeError):
    def __init__(self, stage: Stage, message: str):
        super().__init__(f"{stage.value}: {message}")
        self.stage = stage


@dataclass(frozen=True)
class PipelineTrace:
    stages: tuple[str, ...]
    stage_times: Mapping[str, float]
    elapsed: float
    width: int
    height: int
    a_text: float
    a_info: float


@dataclass
class _Context:
    image: RasterImage
    template: TicketTemplate
    models: Models
    settings: PipelineSettings
    regions: list[KeywordRegion] = field(default_factory=list)
    chars: dict[int, list[CharDetection]] = field(default_factory=dict)
    lines: list[Box] = field(default_factory=list)
    cuts: list[list[Box]] = field(default_factory=list)
    line_chars: list[list[CharDetection]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    a_text: float = 0.0

    def roi(self, box: Box) -> RasterImage:
        return self.image.crop(int(box.x_min), int(box.y_min), int(box.x_max), int(box.y_max))


def _region_detection(ctx: _Context) -> None:
    ctx.regions = detect_regions(
        ctx.image, ctx.template, ctx.models.glyphs, ctx.settings.region_stage, ctx.settings.search_radius
    )
    ctx.a_text = sum(area(r.box) + area(ctx.template.field(r.keyword).label_box) for r in ctx.regions)


def _char_detection(ctx: _Context) -> None:
    stage = ctx.settings.char_stage
    for i, r in enumerate(ctx.regions):
        spec = ctx.template.field(r.keyword)
        if not spec.needs_recognition:
            ctx.chars[i] = detect_chars(ctx.roi(r.box), ctx.models.glyphs.subset(spec.charset), stage)


def _line_charset(template: TicketTemplate) -> str:
    chars = dict.fromkeys(UPPER + ":" + SYMBOLS)
    for f in template.fields:
        chars.update(dict.fromkeys(f.charset))
    return "".join(chars)


def _char_recognition(ctx: _Context) -> None:
    rec = ctx.models.recognizer
    if rec is None:
        raise PipelineError(Stage.CHAR_RECOGNITION, "char-recognition unavailable")
    if ctx.template.fixed:
        for i, r in enumerate(ctx.regions):
            spec = ctx.template.field(r.keyword)
            if spec.needs_recognition:
                roi = ctx.roi(r.box)
                ctx.chars[i] = rec.read(roi, Box(0, 0, roi.width, roi.height), spec.charset)
        return
    charset = _line_charset(ctx.template)
    ctx.line_chars = [rec.recognize_cuts(ctx.image, cuts, charset) for cuts in ctx.cuts]
    ctx.a_text = sum(area(c.position) for line in ctx.line_chars for c in line)


def _full_surface_detection(ctx: _Context) -> None:
    s = ctx.settings
    st = s.anchor_spec.stride
    grid = generate_anchors(s.anchor_spec, math.ceil(ctx.image.height / st), math.ceil(ctx.image.width / st))
    proposals = propose_text_regions(ctx.image, grid, threshold=s.proposal_threshold, iou_threshold=s.standard_iou)
    ctx.lines = detect_text_lines(ctx.image, proposals, gap=s.line_gap)


def _char_level_cut(ctx: _Context) -> None:
    ctx.cuts = [cut_chars(ctx.image, line) for line in ctx.lines]


def _split_lines(ctx: _Context) -> None:
    """Turn each ``CAPTION:VALUE`` line into a keyword region with ROI-local characters."""
    by_label = {f.label: f.keyword for f in ctx.template.fields}
    for line in ctx.line_chars:
        ordered = sorted(line, key=lambda c: (c.position.x_min, c.position.as_tuple()))
        text = "".join(c.content for c in ordered)
        if ":" not in text:
            continue
        colon = text.index(":")
        keyword = by_label.get(text[:colon])
        value = ordered[colon + 1 :]
        if keyword is None:
            ctx.warnings.append(f"unknown caption {text[:colon]!r}")
            continue
        if not value:
            ctx.warnings.append(f"empty value for {keyword.value}")
            continue
        span = Box(
            min(c.position.x_min for c in value), min(c.position.y_min for c in value),
            max(c.position.x_max for c in value), max(c.position.y_max for c in value),
        )
        score = sum(c.score for c in value) / len(value)
        ctx.chars[len(ctx.regions)] = [
            CharDetection(c.position.translate(-span.x_min, -span.y_min), c.content, c.score) for c in value
        ]
        ctx.regions.append(KeywordRegion(keyword, span, score))


def _assembly(ctx: _Context) -> RecognitionResult:
    if not ctx.template.fixed:
        _split_lines(ctx)
    if not ctx.regions:
        ctx.warnings.append("no text regions detected")
    return assemble_ticket(ctx.regions, ctx.chars, ticket_class=ticket_class_of(ctx.template))


_HANDLERS: dict[Stage, Callable[[_Context], object]] = {
    Stage.REGION_DETECTION: _region_detection,
    Stage.CHAR_DETECTION: _char_detection,
    Stage.CHAR_RECOGNITION: _char_recognition,
    Stage.FULL_SURFACE_DETECTION: _full_surface_detection,
    Stage.CHAR_LEVEL_CUT: _char_level_cut,
    Stage.ASSEMBLY: _assembly,
}


def execute_pipeline(
    image: RasterImage,
    template_id: str,
    registry: TemplateRegistry,
    models: Models | None = None,
    settings: PipelineSettings | None = None,
    source_id: str = "",
) -> tuple[RecognitionResult, PipelineTrace]:
    """Run the template's plan stage by stage; returns the result and its timing trace."""
    start = time.perf_counter()
    template = registry[template_id]
    plan = plan_for(classify_ticket(template_id, registry))
    ctx = _Context(image, template, models or Models.reference(), settings or PipelineSettings())
    log: list[str] = []
    times: dict[str, float] = {}
    result: RecognitionResult | None = None
    for stage in plan.stages:
        t0 = time.perf_counter()
        log.append(stage.value)
        try:
            out = _HANDLERS[stage](ctx)
        except ValueError as exc:
            raise PipelineError(stage, str(exc)) from exc
        times[stage.value] = time.perf_counter() - t0
        if stage is Stage.ASSEMBLY:
            result = out  # type: ignore[assignment]
    assert result is not None
    result = RecognitionResult(source_id, result.ticket_class, result.entries, tuple(ctx.warnings))
    a_info = sum(area(b) for v in result.entries.values() for b in v.char_boxes)
    trace = PipelineTrace(tuple(log), times, time.perf_counter() - start, image.width, image.height,
                          float(ctx.a_text), float(a_info))
    return result, trace


def run_pipeline(
    image: RasterImage,
    template_id: str,
    registry: TemplateRegistry,
    models: Models | None = None,
    settings: PipelineSettings | None = None,
    source_id: str = "",
) -> RecognitionResult:
    return execute_pipeline(image, template_id, registry, models, settings, source_id)[0]
