"""Acceptance criteria, one test each.

Every test prints a single ``PASS``/``FAIL`` line (also repeated in the
terminal summary) and then asserts, so a failure is both reported and red.
"""

import math
import time
from contextlib import contextmanager
from itertools import combinations

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from ticketrec.anchors import AnchorSpec, generate_anchors
from ticketrec.detector import CHAR_STAGE, DetectorStage, detect_chars
from ticketrec.geometry import Box, decode, encode, iou
from ticketrec.losses import (
    BOX_LOSSES,
    ciou_loss,
    fit_box,
    gradient_check,
    iou_loss,
    random_box_pair,
)
from ticketrec.metrics_timing import (
    TimeModel,
    TimingObservation,
    evaluate_results,
    field_accuracy,
    fit_time_model,
    predict_time,
)
from ticketrec.nms import ScoredDetection, brute_force_nms_oracle, lucnms, standard_nms
from ticketrec.pattern_router import PATTERN_OF, classify_ticket, execute_pipeline, plan_for
from ticketrec.raster import RasterImage
from ticketrec.synth import DEFAULT_MIX, plan_corpus, render_ticket
from ticketrec.ticket_model import TicketClass


@contextmanager
def criterion(number, title):
    checks = []
    start = time.perf_counter()
    try:
        yield checks
        failed = [name for name, ok in checks if not ok]
    except Exception as exc:
        failed = [f"{type(exc).__name__}: {exc}"]
    elapsed = time.perf_counter() - start
    status = "FAIL" if failed else "PASS"
    detail = f" ({'; '.join(failed)})" if failed else ""
    line = f"{status} criterion {number}: {title} [{elapsed:.2f}s]{detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert not failed, line


def test_criterion_1_gradient_correctness():
    with criterion(1, "analytic box-loss gradients match central differences") as checks:
        start = time.perf_counter()
        for kind in ("iou", "giou", "ciou"):
            assert kind in BOX_LOSSES
            rep = gradient_check(kind, 1000, seed=2024, epsilon=1e-6, tolerance=1e-4, margin=1e-3)
            checks.append((f"{kind}: {len(rep.failures)} mismatches, worst {rep.worst:.2e}", rep.ok))
            checks.append((f"{kind}: too few pairs checked ({rep.checked})", rep.checked >= 900))
        checks.append(("runtime >= 5 s", time.perf_counter() - start < 5.0))


def test_criterion_2_ciou_anchors():
    with criterion(2, "CIoU identity, hand value and lower bound") as checks:
        b = Box(1.25, -3.5, 7.0, 2.0)
        checks.append(("L(b, b) != 0", ciou_loss(b, b).value == 0.0))
        concentric = ciou_loss(Box(0.5, 0.5, 1.5, 1.5), Box(0.0, 0.0, 2.0, 2.0)).value
        checks.append((f"concentric squares gave {concentric!r}", abs(concentric - 0.75) <= 1e-9))
        rng = np.random.default_rng(7)
        worst = math.inf
        for _ in range(10_000):
            p, g = random_box_pair(rng)
            pb, gb = Box(*p), Box(*g)
            worst = min(worst, ciou_loss(pb, gb).value - (1.0 - iou(pb, gb)))
        checks.append((f"L_CIoU < 1 - IoU by {-worst:.3e}", worst >= -1e-12))


def random_detections(rng, n):
    centers = rng.uniform(0, 120, (n, 2))
    sizes = rng.uniform(5, 40, (n, 2))
    classes = rng.integers(0, 4, n)
    # coarse scores force ties through the tie-break
    scores = np.round(rng.uniform(0, 1, n), 1)
    return [
        ScoredDetection(Box(cx, cy, cx + w, cy + h), int(c), float(s))
        for (cx, cy), (w, h), c, s in zip(centers, sizes, classes, scores)
    ]


def test_criterion_3_nms_oracle_equivalence():
    with criterion(3, "standard_nms and lucnms equal the brute-force oracle") as checks:
        rng = np.random.default_rng(3)
        start = time.perf_counter()
        std_bad = luc_bad = 0
        for _ in range(500):
            dets = random_detections(rng, int(rng.integers(0, 201)))
            thr = float(rng.choice([0.3, 0.5, 0.7]))
            std_bad += standard_nms(dets, thr) != brute_force_nms_oracle(dets, thr, class_agnostic=False)
            luc_bad += lucnms(dets, thr) != brute_force_nms_oracle(dets, thr, class_agnostic=True)
        checks.append((f"standard_nms differs on {std_bad} inputs", std_bad == 0))
        checks.append((f"lucnms differs on {luc_bad} inputs", luc_bad == 0))
        checks.append(("runtime >= 10 s", time.perf_counter() - start < 10.0))


def overlapping_pairs(boxes, threshold):
    return sum(iou(a, b) >= threshold for a, b in combinations(boxes, 2))


def pipeline_corpus(registry, models, count, seed, sigma=0.0, max_shift=0):
    results, truths, texts = [], {}, {}
    plan_ok = unique_ok = True
    for e in plan_corpus(registry, count, seed, DEFAULT_MIX, sigma=sigma, max_shift=max_shift):
        img, gt = render_ticket(registry[e.template], e.seed, e.noise, models.glyphs)
        res, trace = execute_pipeline(img, e.template, registry, models, source_id=e.id)
        plan_ok &= list(trace.stages) == plan_for(classify_ticket(e.template, registry)).names()
        unique_ok &= all(
            overlapping_pairs(v.char_boxes, CHAR_STAGE.iou_threshold) == 0 for v in res.entries.values()
        )
        results.append(res)
        truths[e.id] = {k.value: (f.text, f.char_boxes) for k, f in gt.fields.items()}
        texts[e.id] = gt.texts()
    return results, truths, texts, plan_ok, unique_ok


def test_criterion_4_lucnms_uniqueness(registry, glyphs, models):
    with criterion(4, "one hypothesis per location under lucnms") as checks:
        roi = RasterImage(np.pad(render_ticket_text("8", glyphs), 6, constant_values=1.0))
        vocab = glyphs.subset("83")
        standard = detect_chars(roi, vocab, DetectorStage("character", CHAR_STAGE.threshold, "standard"))
        unique = detect_chars(roi, vocab, CHAR_STAGE)
        stacked = max((sum(iou(a.position, b.position) >= 0.5 for b in standard) for a in standard), default=0)
        checks.append((f"standard NMS kept {stacked} hypotheses at the glyph", stacked >= 2))
        checks.append((f"lucnms kept {len(unique)} hypotheses", len(unique) == 1 and unique[0].content == "8"))
        *_, unique_ok = pipeline_corpus(registry, models, 60, 44, sigma=0.03, max_shift=4)
        checks.append(("overlapping characters in a pipeline ROI", unique_ok))


def render_ticket_text(text, glyphs):
    from ticketrec.glyphs import render_text

    return render_text(text, glyphs)


def test_criterion_5_encode_decode_roundtrip():
    with criterion(5, "encode/decode roundtrip") as checks:
        rng = np.random.default_rng(5)
        worst = 0.0
        for _ in range(10_000):
            g, a = random_box_pair(rng, extent=1000.0, size=(1.0, 400.0))
            gt, anchor = Box(*g), Box(*a)
            back = decode(encode(gt, anchor), anchor)
            worst = max(worst, float(np.abs(np.subtract(back.as_tuple(), gt.as_tuple())).max()))
        checks.append((f"max coordinate error {worst:.3e}", worst <= 1e-9))


def test_criterion_6_anchor_count_law():
    with criterion(6, "24 anchors per cell; slender anchors are wide") as checks:
        rng = np.random.default_rng(6)
        spec = AnchorSpec()
        for h, w in rng.integers(1, 65, (20, 2)):
            grid = generate_anchors(spec, int(h), int(w))
            checks.append((f"{h}x{w} grid gave {len(grid)} anchors", len(grid) == 24 * h * w))
            ratios = np.array([grid.ratio_of(i) for i in range(len(grid))])
            widths = grid.coords[:, 2] - grid.coords[:, 0]
            heights = grid.coords[:, 3] - grid.coords[:, 1]
            slim = ratios < 1
            checks.append((f"{h}x{w}: a ratio<1 anchor is not wider than tall", bool(np.all(widths[slim] > heights[slim]))))


def test_criterion_7_end_to_end(registry, models):
    with criterion(7, "end-to-end recognition on synthetic corpora") as checks:
        start = time.perf_counter()
        results, truths, texts, plan_ok, unique_ok = pipeline_corpus(registry, models, 200, 7)
        report = evaluate_results(results, truths)
        checks.append((f"clean field accuracy {report['field_accuracy']:.4f}", report["field_accuracy"] == 1.0))
        checks.append((f"clean character AP50 {report['char_ap50']:.4f}", report["char_ap50"] == 1.0))
        noisy, _, noisy_texts, plan_ok2, unique_ok2 = pipeline_corpus(registry, models, 200, 8, sigma=0.03, max_shift=4)
        acc = field_accuracy(noisy, noisy_texts)
        checks.append((f"noisy field accuracy {acc:.4f}", acc >= 0.95))
        checks.append(("stage log differs from plan", plan_ok and plan_ok2))
        checks.append(("overlapping characters in an ROI", unique_ok and unique_ok2))
        checks.append(("runtime >= 120 s", time.perf_counter() - start < 120.0))


def observations(rng, n, model, noise):
    out = []
    # resolutions of the shipped templates plus a jitter so (w + h) varies
    sizes = [(1024, 2048), (600, 1024), (520, 1500), (800, 1200)]
    for _ in range(n):
        w, h = sizes[rng.integers(len(sizes))]
        w, h = w + rng.integers(-50, 51), h + rng.integers(-50, 51)
        a_text = rng.uniform(0.05, 0.4) * w * h
        a_info = rng.uniform(0.1, 0.9) * a_text
        geo = TimingObservation(w, h, a_text, a_info)
        out.append(TimingObservation(w, h, a_text, a_info, predict_time(model, geo) + rng.normal(0, noise)))
    return out


def test_criterion_8_time_model_identifiability():
    with criterion(8, "time model recovers planted coefficients") as checks:
        planted = TimeModel(alpha=1.5e-5, beta=4e-8, gamma=9e-8, t0=0.012)
        fit = fit_time_model(observations(np.random.default_rng(8), 50, planted, 0.0))
        rel = max(abs(g - p) / abs(p) for g, p in zip(fit.model.as_tuple(), planted.as_tuple()))
        checks.append((f"worst relative coefficient error {rel:.2e}", rel <= 1e-6))
        noisy = fit_time_model(observations(np.random.default_rng(9), 500, planted, 1e-3))
        checks.append((f"R^2 with 1 ms noise {noisy.r2:.4f}", noisy.r2 >= 0.99))


def test_criterion_9_routing_totality(registry, models):
    with criterion(9, "routing is total and follows the corpus mix") as checks:
        plans = {c: plan_for(c) for c in TicketClass}
        for tid in registry:
            cls = classify_ticket(tid, registry)
            matches = [c for c, p in plans.items() if p == plan_for(cls)]
            checks.append((f"{tid} routes to {len(matches)} plans", len(matches) == 1))
        entries = plan_corpus(registry, 10_000, 9, DEFAULT_MIX)
        third = sum(PATTERN_OF[classify_ticket(e.template, registry)] == "III" for e in entries)
        checks.append((f"split {len(entries) - third}/{third}", (len(entries) - third, third) == (6827, 3173)))
        *_, plan_ok, _ = pipeline_corpus(registry, models, 30, 90, sigma=0.02, max_shift=2)
        checks.append(("stage log differs from plan", plan_ok))


def disjoint_inits(rng, target, n):
    out = []
    while len(out) < n:
        cx, cy = rng.uniform(-40, 40, 2)
        w, h = rng.uniform(2, 30, 2)
        b = Box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
        if iou(b, target) == 0.0:
            out.append(b)
    return out


def test_criterion_10_loss_family_ranking():
    with criterion(10, "CIoU and GIoU fit from disjoint starts; IoU loss cannot move") as checks:
        rng = np.random.default_rng(10)
        target = Box(0.0, 0.0, 8.0, 5.0)
        inits = disjoint_inits(rng, target, 25)
        for kind in ("ciou", "giou"):
            fits = [fit_box(kind, b, target, max_steps=2000, stop_iou=0.99) for b in inits]
            bad = [f for f in fits if not (f.converged and f.final_iou >= 0.99 and f.steps <= 2000)]
            checks.append((f"{kind}: {len(bad)} of {len(fits)} fits missed IoU 0.99", not bad))
        grads = [np.abs(iou_loss(b, target).gradient).max() for b in inits]
        checks.append(("IoU loss has a nonzero gradient on a disjoint pair", max(grads) == 0.0))
        stuck = [fit_box("iou", b, target, max_steps=2000) for b in inits]
        checks.append(("IoU loss moved a disjoint box", all(f.box == b and f.final_iou == 0.0 for f, b in zip(stuck, inits))))
