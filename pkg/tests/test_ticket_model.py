import json
import random

import pytest
from hypothesis import given, strategies as st

from ticketrec.geometry import Box
from ticketrec.ticket_model import (
    CharDetection,
    FieldValue,
    KeywordClass,
    KeywordRegion,
    RecognitionResult,
    TicketClass,
    Verdict,
    assemble_ticket,
    assemble_value,
    validate_field,
)

ROI = Box(100, 50, 300, 90)


def ch(c, x, y=0, score=0.9):
    return CharDetection(Box(x, y, x + 4, y + 10), c, score)


def test_assemble_value_examples():
    v = assemble_value([ch("1", 5), ch("2", 10), ch("3", 1)], ROI)
    assert v.text == "312"
    assert v.char_boxes[0] == Box(101, 50, 105, 60)
    empty = assemble_value([], ROI)
    assert empty.text == "" and empty.char_boxes == ()
    two = assemble_value([ch("C", 0, 20), ch("B", 6, 1), ch("A", 0, 0)], ROI)
    assert two.text == "ABC" and two.line_breaks == (2,)


@given(st.permutations(list(range(8))))
def test_assemble_value_permutation_invariant(order):
    chars = [ch(str(i), 6 * i, (i % 2) * 2) for i in range(4)] + [ch(c, 6 * i, 25) for i, c in enumerate("WXYZ")]
    base = assemble_value(chars, ROI)
    assert assemble_value([chars[i] for i in order], ROI) == base
    assert base.text == "0123WXYZ"


def test_field_value_lengths_must_agree():
    with pytest.raises(ValueError):
        FieldValue("ab", (Box(0, 0, 1, 1),), (0.5,))


def test_keyword_region_needs_area():
    with pytest.raises(ValueError):
        KeywordRegion(KeywordClass.DATE, Box(0, 0, 0, 4), 0.9)


def test_unknown_keyword_rejected():
    with pytest.raises(ValueError):
        KeywordClass("colour")


def test_assemble_ticket_examples():
    date = KeywordRegion(KeywordClass.DATE, Box(0, 0, 200, 20), 0.9)
    chars = [ch(c, 6 * i) for i, c in enumerate("2019-07-01")]
    res = assemble_ticket([date], {0: chars})
    assert res.texts() == {"date": "2019-07-01"}
    assert assemble_ticket([], {}).entries == {}
    hi = KeywordRegion(KeywordClass.INVOICE_NUMBER, Box(0, 0, 50, 20), 0.9)
    lo = KeywordRegion(KeywordClass.INVOICE_NUMBER, Box(0, 40, 50, 60), 0.6)
    res = assemble_ticket([lo, hi], {0: [ch("1", 0)], 1: [ch("2", 0)]})
    assert res.texts() == {"invoice-number": "2"}
    with pytest.raises(IndexError):
        assemble_ticket([hi], {3: []})


def test_char_boxes_lie_in_region():
    region = KeywordRegion(KeywordClass.AMOUNT, Box(40, 40, 120, 70), 0.8)
    res = assemble_ticket([region], {0: [ch(c, 8 * i + 2, 3) for i, c in enumerate("12.50")]})
    for b in res.entries[KeywordClass.AMOUNT].char_boxes:
        assert region.box.contains(b, tol=2)


@pytest.mark.parametrize(
    "keyword, text, verdict",
    [
        (KeywordClass.AMOUNT, "123.45", Verdict.OK),
        (KeywordClass.AMOUNT, "¥88", Verdict.OK),
        (KeywordClass.DATE, "20A9", Verdict.PATTERN_MISMATCH),
        (KeywordClass.INVOICE_CODE, "", Verdict.PATTERN_MISMATCH),
        (KeywordClass.TRAIN_NUMBER, "G1234", Verdict.OK),
        (KeywordClass.TRAIN_NUMBER, "X12", Verdict.PATTERN_MISMATCH),
    ],
)
def test_validate_field(keyword, text, verdict):
    assert validate_field(keyword, text) is verdict
    assert validate_field(keyword, FieldValue(text, tuple(Box(0, 0, 1, 1) for _ in text), tuple(1.0 for _ in text))) is verdict


def _sample_result():
    entries = {
        KeywordClass.AMOUNT: FieldValue("¥9", (Box(0, 0, 1, 1), Box(1, 0, 2, 1)), (0.5, 0.75)),
        KeywordClass.DATE: FieldValue("1", (Box(3, 3, 4, 5),), (1.0,)),
    }
    return RecognitionResult("t00001", TicketClass.I_B, entries, ("note",))


def test_json_roundtrip_and_order():
    res = _sample_result()
    d = json.loads(res.to_json())
    assert [e["keyword"] for e in d["entries"]] == ["date", "amount"]
    assert d["source_id"] == "t00001" and d["ticket_class"] == "I-B"
    back = RecognitionResult.from_dict(d)
    assert back.texts() == res.texts() and back.warnings == ("note",)
    assert back.entries[KeywordClass.AMOUNT].char_boxes == res.entries[KeywordClass.AMOUNT].char_boxes


def test_records_format():
    lines = _sample_result().to_records()
    assert lines[0] == "ticket\tt00001\tI-B"
    assert lines[1].startswith("field\tdate\t1\t")
    assert sum(1 for l in lines if l.startswith("char\t")) == 3
    assert all("\n" not in l for l in lines)


def test_random_field_shuffle_roundtrip():
    rng = random.Random(0)
    chars = [ch(c, 6 * i) for i, c in enumerate("ABCDEF")]
    rng.shuffle(chars)
    assert assemble_value(chars, ROI).text == "ABCDEF"
