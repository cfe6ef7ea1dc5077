"""Evaluation metrics and the linear recognition-time model.

The time model predicts one ticket's processing time from its image size, its
total text area and its business-information area:

    T = alpha * (w + h) + beta * a_text + gamma * a_info + t0
"""

from __future__ import annotations

import difflib
import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Any, Callable, Hashable, Iterable, Mapping, Sequence

import numpy as np

from .geometry import Box, iou
from .nms import ScoredDetection
from .ticket_model import RecognitionResult

REGRESSORS = ("w+h", "a_text", "a_info", "1")


@dataclass(frozen=True)
class TimeModel:
    alpha: float
    beta: float
    gamma: float
    t0: float

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in (self.alpha, self.beta, self.gamma, self.t0)):
            raise ValueError("time model coefficients must be finite")
        if self.t0 < 0:
            raise ValueError(f"constant term must be >= 0, got {self.t0}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.alpha, self.beta, self.gamma, self.t0)


@dataclass(frozen=True)
class TimingObservation:
    w: float
    h: float
    a_text: float
    a_info: float
    elapsed: float = 0.0

    def __post_init__(self) -> None:
        if min(self.w, self.h, self.a_text, self.a_info, self.elapsed) < 0:
            raise ValueError("timing observations must be nonnegative")
        if not self.a_info <= self.a_text <= self.w * self.h:
            raise ValueError(
                f"need a_info <= a_text <= w*h, got {self.a_info}, {self.a_text}, {self.w * self.h}"
            )


def predict_time(m: TimeModel, obs: Any) -> float:
    return m.alpha * (obs.w + obs.h) + m.beta * obs.a_text + m.gamma * obs.a_info + m.t0


class RankDeficientError(ValueError):
    def __init__(self, message: str, regressors: Sequence[str]):
        super().__init__(message)
        self.regressors = tuple(regressors)


@dataclass(frozen=True)
class TimeFit:
    model: TimeModel
    r2: float
    residuals: np.ndarray = field(repr=False)
    constrained: bool = False


def _design(observations: Sequence[Any]) -> np.ndarray:
    return np.array([[o.w + o.h, o.a_text, o.a_info, 1.0] for o in observations], dtype=float)


def _r2(y: np.ndarray, resid: np.ndarray) -> float:
    ss_tot = float(((y - y.mean()) ** 2).sum())
    ss_res = float((resid**2).sum())
    if ss_tot == 0.0:
        return 1.0 if ss_res == 0.0 else 0.0
    return 1.0 - ss_res / ss_tot


def _solve(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    scale = np.abs(x).max(axis=0)
    scale[scale == 0] = 1.0
    coef, *_ = np.linalg.lstsq(x / scale, y, rcond=None)
    return coef / scale


def fit_time_model(observations: Sequence[TimingObservation]) -> TimeFit:
    """Ordinary least squares over (w + h, a_text, a_info, 1).

    When the unconstrained constant term comes out negative the model is
    refitted through the origin, since a per-ticket overhead cannot be negative.
    """
    n = len(observations)
    if n < len(REGRESSORS):
        raise RankDeficientError(
            f"under-determined: {n} observations for {len(REGRESSORS)} coefficients", REGRESSORS
        )
    x = _design(observations)
    y = np.array([o.elapsed for o in observations], dtype=float)
    scale = np.abs(x).max(axis=0)
    scale[scale == 0] = 1.0
    _, s, vt = np.linalg.svd(x / scale, full_matrices=True)
    tol = max(x.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0) * 1e3
    rank = int((s > tol).sum())
    if rank < len(REGRESSORS):
        null = vt[rank:]
        involved = [REGRESSORS[j] for j in range(len(REGRESSORS)) if np.abs(null[:, j]).max() > 1e-8]
        raise RankDeficientError(f"collinear regressors: {', '.join(involved)}", involved)

    coef = _solve(x, y)
    constrained = False
    if coef[3] < 0:
        coef = np.append(_solve(x[:, :3], y), 0.0)
        constrained = True
    resid = y - x @ coef
    return TimeFit(TimeModel(*(float(c) for c in coef)), _r2(y, resid), resid, constrained)


# ---------------------------------------------------------------- detection AP


@dataclass(frozen=True)
class _Item:
    image: Hashable
    box: Box
    cls: Hashable
    score: float = 1.0
    key: Hashable = None


def _pr_area(tp: np.ndarray, n_gt: int) -> float:
    if n_gt == 0:
        return 0.0
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, tp.size + 1)
    # all-point interpolation: precision envelope, summed over recall steps
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(((recall - prev) * env).sum())


def _match(dets: Sequence[_Item], gts: Sequence[_Item], thr: float) -> np.ndarray:
    """Greedy score-ordered matching; each detection takes its best unmatched ground truth."""
    by_image: dict[Hashable, list[int]] = {}
    for j, g in enumerate(gts):
        by_image.setdefault(g.image, []).append(j)
    used = np.zeros(len(gts), dtype=bool)
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].box.as_tuple(), i))
    tp = np.zeros(len(dets))
    for rank, i in enumerate(order):
        d = dets[i]
        best, best_iou = -1, thr
        for j in by_image.get(d.image, ()):
            if used[j] or gts[j].key != d.key:
                continue
            o = iou(d.box, gts[j].box)
            if o >= best_iou and (best < 0 or o > best_iou):
                best, best_iou = j, o
        if best >= 0:
            used[best] = True
            tp[rank] = 1.0
    return tp


def _per_class(dets: Sequence[_Item], gts: Sequence[_Item], thr: float) -> dict[Hashable, tuple[float, float]]:
    """Per ground-truth class: (AP, recall)."""
    out = {}
    for cls in dict.fromkeys(g.cls for g in gts):
        cg = [g for g in gts if g.cls == cls]
        cd = [d for d in dets if d.cls == cls]
        tp = _match(cd, cg, thr)
        out[cls] = (_pr_area(tp, len(cg)), float(tp.sum()) / len(cg))
    return out


def _items_from(dets: Iterable[ScoredDetection], gts: Iterable[tuple[Box, Hashable]], image: Hashable = 0):
    return (
        [_Item(image, d.box, d.class_id, d.score) for d in dets],
        [_Item(image, b, c) for b, c in gts],
    )


def average_precision_50(dets: Sequence[ScoredDetection], gts: Sequence[tuple[Box, Hashable]]) -> float:
    """Macro-averaged all-point AP at IoU 0.5 over the classes present in ``gts``."""
    return corpus_average_precision_50([(dets, gts)])


def _corpus_items(per_image: Iterable[tuple[Sequence[ScoredDetection], Sequence[tuple[Box, Hashable]]]]):
    dets: list[_Item] = []
    gts: list[_Item] = []
    for k, (d, g) in enumerate(per_image):
        di, gi = _items_from(d, g, k)
        dets += di
        gts += gi
    return dets, gts


def per_class_ap50(per_image, thr: float = 0.5) -> dict[Hashable, tuple[float, float]]:
    dets, gts = _corpus_items(per_image)
    return _per_class(dets, gts, thr)


def corpus_average_precision_50(
    per_image: Iterable[tuple[Sequence[ScoredDetection], Sequence[tuple[Box, Hashable]]]]
) -> float:
    """AP50 with detections pooled across images; matches never cross images."""
    classes = per_class_ap50(per_image)
    if not classes:
        warnings.warn("AP50 of an empty ground-truth set is defined as 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return float(np.mean([ap for ap, _ in classes.values()]))


def recall_50(dets: Sequence[ScoredDetection], gts: Sequence[tuple[Box, Hashable]]) -> float:
    """Fraction of ground-truth boxes matched by a same-class detection at IoU >= 0.5."""
    classes = per_class_ap50([(dets, gts)])
    n = len(gts)
    return sum(r * sum(1 for _, c in gts if c == cls) for cls, (_, r) in classes.items()) / n if n else 0.0


# ------------------------------------------------------------ text accuracy


class EvaluationError(ValueError):
    pass


TruthTexts = Mapping[str, Mapping[str, str]]


def _align(results: Iterable[RecognitionResult] | Mapping[str, RecognitionResult], truths: TruthTexts):
    by_id = dict(results) if isinstance(results, Mapping) else {r.source_id: r for r in results}
    missing_results = sorted(set(truths) - set(by_id))
    missing_truths = sorted(set(by_id) - set(truths))
    if missing_results or missing_truths:
        parts = []
        if missing_results:
            parts.append(f"no result for: {', '.join(missing_results)}")
        if missing_truths:
            parts.append(f"no truth for: {', '.join(missing_truths)}")
        raise EvaluationError("; ".join(parts))
    return [(by_id[i].texts(), truths[i]) for i in sorted(truths)]


def field_accuracy(results, truths: TruthTexts) -> float:
    """Fraction of planted (ticket, field) pairs read exactly."""
    pairs = _align(results, truths)
    total = sum(len(t) for _, t in pairs)
    if total == 0:
        return 1.0
    right = sum(got.get(k) == v for got, t in pairs for k, v in t.items())
    return right / total


def char_accuracy(results, truths: TruthTexts) -> float:
    """Matched characters (longest common blocks) over planted characters."""
    pairs = _align(results, truths)
    total = sum(len(v) for _, t in pairs for v in t.values())
    if total == 0:
        return 1.0
    hit = 0
    for got, t in pairs:
        for k, v in t.items():
            sm = difflib.SequenceMatcher(None, v, got.get(k, ""), autojunk=False)
            hit += sum(b.size for b in sm.get_matching_blocks())
    return hit / total


TruthBoxes = Mapping[str, Mapping[str, tuple[str, Sequence[Box]]]]


def _span(boxes: Sequence[Box]) -> Box:
    return Box(min(b.x_min for b in boxes), min(b.y_min for b in boxes),
               max(b.x_max for b in boxes), max(b.y_max for b in boxes))


def evaluate_results(results, truths: TruthBoxes) -> dict:
    """Full evaluation report.

    ``truths`` maps ticket id -> keyword -> (text, character boxes). Character
    AP50 scores every character box against the planted ones; field AP50
    scores each field's character span and only counts it when the text is
    exact as well.
    """
    texts = {i: {k: v[0] for k, v in t.items()} for i, t in truths.items()}
    pairs = _align(results, texts)
    by_id = dict(results) if isinstance(results, Mapping) else {r.source_id: r for r in results}
    cd, cg, fd, fg = [], [], [], []
    for i in sorted(truths):
        for k, (text, boxes) in truths[i].items():
            cg += [_Item(i, b, c) for c, b in zip(text, boxes)]
            if boxes:
                fg.append(_Item(i, _span(boxes), k, key=text))
        for k, v in by_id[i].entries.items():
            cd += [_Item(i, b, c, s) for c, b, s in zip(v.text, v.char_boxes, v.char_scores)]
            if v.char_boxes:
                fd.append(_Item(i, _span(v.char_boxes), k.value, v.mean_score, key=v.text))
    char_cls = _per_class(cd, cg, 0.5)
    field_cls = _per_class(fd, fg, 0.5)

    def macro(d):
        return float(np.mean([ap for ap, _ in d.values()])) if d else 0.0

    def pooled_recall(d, items):
        counts: dict = {}
        for g in items:
            counts[g.cls] = counts.get(g.cls, 0) + 1
        n = sum(counts.values())
        return sum(r * counts[c] for c, (_, r) in d.items()) / n if n else 0.0

    return {
        "tickets": len(pairs),
        "char_ap50": macro(char_cls),
        "char_recall": pooled_recall(char_cls, cg),
        "char_ap50_per_class": {str(c): ap for c, (ap, _) in sorted(char_cls.items(), key=lambda kv: str(kv[0]))},
        "field_ap50": macro(field_cls),
        "field_recall": pooled_recall(field_cls, fg),
        "field_ap50_per_class": {str(c): ap for c, (ap, _) in sorted(field_cls.items(), key=lambda kv: str(kv[0]))},
        "field_accuracy": field_accuracy(results, texts),
        "char_accuracy": char_accuracy(results, texts),
    }


# ----------------------------------------------------------------- throughput


@dataclass(frozen=True)
class FpsReport:
    fps: float
    total_seconds: float
    count: int
    per_ticket: tuple[float, ...]
    mean_stage_times: Mapping[str, float]
    observations: tuple[TimingObservation, ...]


def observation_from_trace(trace: Any) -> TimingObservation:
    return TimingObservation(trace.width, trace.height, trace.a_text, trace.a_info, trace.elapsed)


def measure_fps(run: Callable[[Any], Any], corpus: Sequence[Any], warmup: int = 1) -> FpsReport:
    """Time ``run`` over ``corpus`` after ``warmup`` discarded calls.

    ``run`` returns a pipeline trace (anything with ``stage_times``, ``elapsed``
    and the geometry fields).
    """
    if not corpus:
        raise ValueError("corpus is empty")
    for item in list(corpus)[: max(warmup, 0)]:
        run(item)
    traces = []
    per_ticket = []
    start = time.perf_counter()
    for item in corpus:
        t0 = time.perf_counter()
        traces.append(run(item))
        per_ticket.append(time.perf_counter() - t0)
    total = time.perf_counter() - start
    stages: dict[str, float] = {}
    for tr in traces:
        for k, v in tr.stage_times.items():
            stages[k] = stages.get(k, 0.0) + v / len(traces)
    return FpsReport(
        len(corpus) / total if total > 0 else math.inf,
        total,
        len(corpus),
        tuple(per_ticket),
        stages,
        tuple(observation_from_trace(tr) for tr in traces),
    )
