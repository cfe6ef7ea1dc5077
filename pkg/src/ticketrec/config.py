"""Pipeline configuration: an INI-style file whose keys can all be overridden by flags."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

from .anchors import AnchorSpec
from .losses import BOX_LOSSES, LOSS_KINDS, V_FORMS
from .pattern_router import PipelineSettings


class ConfigError(ValueError):
    pass


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _words(text: str) -> tuple[str, ...]:
    return tuple(text.replace(",", " ").split())


def _path(text: str) -> Path | None:
    return Path(text) if text.strip() else None


# key -> (section, parser, default)
KEYS: dict[str, tuple[str, Callable[[str], Any], Any]] = {
    "templates": ("paths", _path, None),
    "glyphs": ("paths", _path, None),
    "sizes": ("anchors", _floats, AnchorSpec().sizes),
    "ratios": ("anchors", _floats, AnchorSpec().ratios),
    "stride": ("anchors", int, AnchorSpec().stride),
    "standard_iou": ("nms", float, 0.5),
    "lucnms_iou": ("nms", float, 0.5),
    "region_threshold": ("detector", float, PipelineSettings().region_threshold),
    "char_threshold": ("detector", float, PipelineSettings().char_threshold),
    "recognition_threshold": ("detector", float, PipelineSettings().recognition_threshold),
    "proposal_threshold": ("detector", float, PipelineSettings().proposal_threshold),
    "losses": ("gradcheck", _words, tuple(BOX_LOSSES)),
    "v_form": ("gradcheck", str, "squared"),
    "workers": ("run", int, 1),
    "seed": ("run", int, 0),
}

THRESHOLDS = ("standard_iou", "lucnms_iou", "region_threshold", "char_threshold",
              "recognition_threshold", "proposal_threshold")


@dataclass(frozen=True)
class PipelineConfig:
    templates: Path | None = None
    glyphs: Path | None = None
    sizes: tuple[float, ...] = AnchorSpec().sizes
    ratios: tuple[float, ...] = AnchorSpec().ratios
    stride: int = AnchorSpec().stride
    standard_iou: float = 0.5
    lucnms_iou: float = 0.5
    region_threshold: float = PipelineSettings().region_threshold
    char_threshold: float = PipelineSettings().char_threshold
    recognition_threshold: float = PipelineSettings().recognition_threshold
    proposal_threshold: float = PipelineSettings().proposal_threshold
    losses: tuple[str, ...] = tuple(BOX_LOSSES)
    v_form: str = "squared"
    workers: int = 1
    seed: int = 0
    explicit: frozenset[str] = field(default=frozenset(), compare=False)

    def __post_init__(self) -> None:
        for name in ("templates", "glyphs"):
            p = getattr(self, name)
            if p is not None and not Path(p).exists():
                raise ConfigError(f"{name}: path does not exist: {p}")
        for name in THRESHOLDS:
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {getattr(self, name)}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        bad = [k for k in self.losses if k not in LOSS_KINDS]
        if bad:
            raise ConfigError(f"unknown losses {bad}; choose from {LOSS_KINDS}")
        if self.v_form not in V_FORMS:
            raise ConfigError(f"v_form must be one of {V_FORMS}")
        try:
            self.anchor_spec
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def anchor_spec(self) -> AnchorSpec:
        return AnchorSpec(self.sizes, self.ratios, self.stride)

    def settings(self) -> PipelineSettings:
        return PipelineSettings(
            region_threshold=self.region_threshold,
            char_threshold=self.char_threshold,
            recognition_threshold=self.recognition_threshold,
            proposal_threshold=self.proposal_threshold,
            standard_iou=self.standard_iou,
            lucnms_iou=self.lucnms_iou,
            anchor_spec=self.anchor_spec,
        )


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> PipelineConfig:
    """Read ``path`` (if given), then apply ``overrides`` (already-typed or string values)."""
    values: dict[str, Any] = {}
    if path is not None:
        cp = configparser.ConfigParser(interpolation=None)
        try:
            with open(path, encoding="utf-8") as fh:
                cp.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
        for section in cp.sections():
            for key, raw in cp[section].items():
                if key not in KEYS or KEYS[key][0] != section:
                    raise ConfigError(f"unknown key [{section}] {key}")
                try:
                    values[key] = KEYS[key][1](raw)
                except ValueError as exc:
                    raise ConfigError(f"[{section}] {key}: {exc}") from exc
    for key, raw in (overrides or {}).items():
        if key not in KEYS:
            raise ConfigError(f"unknown key {key}")
        if raw is None:
            continue
        try:
            values[key] = KEYS[key][1](raw) if isinstance(raw, str) else raw
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from exc
    try:
        return PipelineConfig(**values, explicit=frozenset(values))
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
