import math

import numpy as np
import pytest

from ticketrec.anchors import AnchorSpec, generate_anchors
from ticketrec.detector import (
    CHAR_STAGE,
    DetectorStage,
    GlyphRecognizer,
    ResolutionMismatch,
    char_hypotheses,
    cut_chars,
    detect_chars,
    detect_regions,
    detect_text_lines,
    local_peaks,
    ncc_map,
    propose_text_regions,
)
from ticketrec.geometry import Box, iou
from ticketrec.glyphs import DIGITS, render_text
from ticketrec.nms import ScoredDetection, brute_force_nms_oracle
from ticketrec.raster import RasterImage
from ticketrec.synth import NoiseSpec, render_ticket


def padded(text, glyphs, pad=6):
    return RasterImage(np.pad(render_text(text, glyphs), pad, constant_values=1.0))


def page_with_lines(lines, width=400, height=200):
    px = np.ones((height, width))
    for text, x, y in lines:
        block = render_text(text)
        px[y : y + block.shape[0], x : x + block.shape[1]] = block
    return RasterImage(px)


def grid_for(img, spec=AnchorSpec()):
    return generate_anchors(spec, math.ceil(img.height / spec.stride), math.ceil(img.width / spec.stride))


def test_ncc_identity_and_flat():
    rng = np.random.default_rng(0)
    k = rng.uniform(size=(5, 4))
    img = np.ones((12, 12))
    img[3:8, 6:10] = k
    m = ncc_map(img, k)
    assert m.shape == (1, 8, 9)
    assert m[0, 3, 6] == pytest.approx(1.0)
    assert m[0].argmax() == 3 * 9 + 6
    assert not ncc_map(np.ones((10, 10)), k).any()
    assert ncc_map(np.ones((3, 3)), k).shape == (1, 0, 0)


def test_local_peaks():
    m = np.zeros((5, 5))
    m[1, 1] = 0.9
    m[3, 3] = 0.8
    m[3, 4] = 0.5
    assert local_peaks(m, 0.6) == [(1, 1), (3, 3)]
    assert local_peaks(np.zeros((0, 0)), 0.1) == []


def test_detect_chars_examples(glyphs):
    found = detect_chars(padded("42", glyphs), glyphs.subset(DIGITS))
    assert [d.content for d in sorted(found, key=lambda d: d.position.x_min)] == ["4", "2"]
    assert all(d.score >= 0.99 for d in found)
    assert detect_chars(RasterImage.blank(40, 30), glyphs.subset(DIGITS)) == []
    with pytest.raises(ValueError):
        detect_chars(padded("1", glyphs), [])


def test_confusable_pair(glyphs):
    roi = padded("8", glyphs)
    vocab = glyphs.subset("83")
    standard = detect_chars(roi, vocab, DetectorStage("character", 0.7, "standard"))
    unique = detect_chars(roi, vocab)
    assert len(standard) >= 2 and {d.content for d in standard} == {"8", "3"}
    assert [d.content for d in unique] == ["8"]
    hyps = char_hypotheses(roi, vocab, 0.7)
    oracle = brute_force_nms_oracle(hyps, 0.5, class_agnostic=True)
    assert [(d.box, d.class_id) for d in oracle] == [(d.position, d.content) for d in unique]


def _crowded_locations(dets, thr=0.5):
    count = 0
    for i, a in enumerate(dets):
        if any(iou(a.position, b.position) >= thr for j, b in enumerate(dets) if j != i):
            count += 1
    return count


def test_lucnms_removes_stacked_hypotheses(glyphs):
    roi = padded("8380 3B8E", glyphs)
    vocab = glyphs.subset("0123456789BE")
    standard = detect_chars(roi, vocab, DetectorStage("character", 0.7, "standard"))
    unique = detect_chars(roi, vocab, CHAR_STAGE)
    assert _crowded_locations(standard) > _crowded_locations(unique) == 0
    assert "".join(d.content for d in sorted(unique, key=lambda d: d.position.x_min)) == "83803B8E"


def test_stage_validation():
    with pytest.raises(ValueError):
        DetectorStage("word", 0.5, "lucnms")
    with pytest.raises(ValueError):
        DetectorStage("character", 0.5, "soft")
    with pytest.raises(ValueError):
        DetectorStage("character", 1.5, "lucnms")
    with pytest.raises(ValueError):
        detect_chars(RasterImage.blank(30, 30), [], DetectorStage("region", 0.5, "standard"))


def test_detect_regions_clean(registry, glyphs):
    t = registry["vat"]
    img, gt = render_ticket(t, 11)
    regions = detect_regions(img, t, glyphs)
    assert {r.keyword for r in regions} == set(gt.fields)
    for r in regions:
        assert iou(r.box, gt.fields[r.keyword].box) >= 0.9
        assert Box(0, 0, img.width, img.height).contains(r.box)


def test_detect_regions_shifted(registry, glyphs):
    t = registry["taxi"]
    img, gt = render_ticket(t, 3, NoiseSpec(dx=4, dy=6))
    regions = {r.keyword: r for r in detect_regions(img, t, glyphs)}
    assert set(regions) == set(gt.fields)
    for k, r in regions.items():
        assert iou(r.box, gt.fields[k].box) >= 0.9


def test_detect_regions_blank_and_resolution(registry, glyphs):
    t = registry["quota"]
    assert detect_regions(RasterImage.blank(t.width, t.height), t, glyphs) == []
    with pytest.raises(ResolutionMismatch):
        detect_regions(RasterImage.blank(t.width, int(t.height * 1.2)), t, glyphs)


def test_propose_single_line():
    img = page_with_lines([("AMT:12345", 60, 80)])
    props = propose_text_regions(img, grid_for(img))
    assert props
    assert props[0].class_id < 1
    line = Box(60, 80, 60 + 9 * 12, 100)
    assert any(iou(p.box, line) > 0 for p in props)
    for p in props:
        assert Box(0, 0, img.width, img.height).contains(p.box)


def test_propose_blank_and_mismatch():
    img = RasterImage.blank(200, 100)
    assert propose_text_regions(img, grid_for(img)) == []
    with pytest.raises(ValueError):
        propose_text_regions(img, generate_anchors(AnchorSpec(), 2, 2))


def test_propose_two_lines():
    img = page_with_lines([("DATE:2020-01-01", 40, 60), ("REF:ABC123", 40, 100)])
    props = propose_text_regions(img, grid_for(img))
    tops = [p for p in props if p.box.y_max <= 90]
    bottoms = [p for p in props if p.box.y_min >= 90]
    assert tops and bottoms
    assert iou(tops[0].box, bottoms[0].box) < 0.5


def test_lines_and_cuts(glyphs):
    img = page_with_lines([("DATE:2020-01-01", 40, 60), ("REF:AB1", 100, 110)])
    lines = detect_text_lines(img, propose_text_regions(img, grid_for(img)))
    assert len(lines) == 2
    assert lines[0].y_min < lines[1].y_min
    cuts = cut_chars(img, lines[1])
    assert len(cuts) == 7
    rec = GlyphRecognizer(glyphs)
    read = rec.recognize_cuts(img, cuts, "REF:AB1")
    assert "".join(d.content for d in read) == "REF:AB1"
    assert "".join(d.content for d in rec.read(img, lines[0], "DATE:0123456789-")) == "DATE:2020-01-01"
    assert rec.recognize(img, Box(5, 5, 17, 25), "0123456789") is None


def test_detection_is_deterministic(registry, glyphs):
    t = registry["train"]
    img, _ = render_ticket(t, 5, NoiseSpec(sigma=0.03))
    assert detect_regions(img, t, glyphs) == detect_regions(img, t, glyphs)
