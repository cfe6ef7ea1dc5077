"""Financial ticket recognition on synthetic rasters.

Fixed-layout tickets are read by locating each field next to its printed
caption and matching glyph templates inside it; free-layout tickets are read
line by line after a full-surface text proposal pass.
"""

from .anchors import AnchorSpec, generate_anchors, match_anchors
from .detector import GlyphRecognizer, ResolutionMismatch, detect_chars, detect_regions
from .geometry import Box, RegressionTarget, decode, encode, iou
from .losses import ciou_loss, fit_box, giou_loss, gradient_check, iou_loss, smooth_l1_loss
from .metrics_timing import TimeModel, evaluate_results, fit_time_model, measure_fps, predict_time
from .nms import ScoredDetection, brute_force_nms_oracle, lucnms, standard_nms
from .pattern_router import Models, PipelineSettings, Stage, classify_ticket, execute_pipeline, plan_for, run_pipeline
from .synth import generate_corpus, plan_corpus, render_ticket
from .templates import TemplateRegistry, load_registry
from .ticket_model import CharDetection, KeywordClass, KeywordRegion, RecognitionResult, TicketClass

__all__ = [
    "AnchorSpec", "Box", "CharDetection", "GlyphRecognizer", "KeywordClass", "KeywordRegion", "Models",
    "PipelineSettings", "RecognitionResult", "RegressionTarget", "ResolutionMismatch", "ScoredDetection",
    "Stage", "TemplateRegistry", "TicketClass", "TimeModel", "brute_force_nms_oracle", "ciou_loss",
    "classify_ticket", "decode", "detect_chars", "detect_regions", "encode", "evaluate_results", "execute_pipeline",
    "fit_box", "fit_time_model", "generate_anchors", "generate_corpus", "giou_loss", "gradient_check", "iou",
    "iou_loss", "load_registry", "lucnms", "match_anchors", "measure_fps", "plan_corpus", "plan_for",
    "predict_time", "render_ticket", "run_pipeline", "smooth_l1_loss", "standard_nms",
]
