import json
from pathlib import Path

import pytest

from ticketrec.cli import main
from ticketrec.synth import read_manifest, write_manifest


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert main(["synth", "--count", "12", "--seed", "3", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def results(corpus, tmp_path_factory):
    path = tmp_path_factory.mktemp("res") / "r.jsonl"
    assert main(["run", str(corpus), "--out", str(path)]) == 0
    return path


def test_synth_default_mix(tmp_path, capsys):
    code, out, _ = run(["synth", "--count", 100, "--mix", "default", "--out", tmp_path / "c"], capsys)
    assert code == 0
    classes = [e.ticket_class for e in read_manifest(tmp_path / "c" / "manifest.tsv")]
    assert sum(c != "II" for c in classes) == 68 and classes.count("II") == 32
    assert len(list((tmp_path / "c" / "images").iterdir())) == 100


def test_synth_zero_and_errors(tmp_path, capsys):
    code, _, _ = run(["synth", "--count", 0, "--out", tmp_path / "z"], capsys)
    assert code == 0 and read_manifest(tmp_path / "z" / "manifest.tsv") == []
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run(["synth", "--count", 1, "--out", blocker / "sub"], capsys)[0] == 3
    assert run(["synth", "--count", 1, "--template", "nope", "--out", tmp_path / "n"], capsys)[0] == 2
    assert run(["synth", "--count", 1, "--mix", "0.5", "--out", tmp_path / "m"], capsys)[0] == 2
    assert run(["synth", "--count", 1, "--sigma", 0.5, "--out", tmp_path / "s"], capsys)[0] == 2
    assert run(["synth", "--count", 1, "--config", tmp_path / "none.ini", "--out", tmp_path / "q"], capsys)[0] == 2


def test_synth_template_subset(tmp_path, capsys):
    code, _, _ = run(["synth", "--count", 4, "--template", "vat", "--out", tmp_path / "v"], capsys)
    assert code == 0
    assert {e.template for e in read_manifest(tmp_path / "v" / "manifest.tsv")} == {"vat"}


def test_run_and_eval_perfect(corpus, results, tmp_path, capsys):
    rows = [json.loads(line) for line in results.read_text().splitlines()]
    assert [r["source_id"] for r in rows] == sorted(r["source_id"] for r in rows) and len(rows) == 12
    report = tmp_path / "rep.json"
    code, out, _ = run(["eval", results, "--truth", corpus, "--report", report], capsys)
    assert code == 0
    data = json.loads(report.read_text())
    for key in ("char_ap50", "field_ap50", "field_accuracy", "char_accuracy", "char_recall", "field_recall"):
        assert data[key] == 1.0
    assert "char_ap50_per_class" in data and "field_ap50_per_class" in data
    assert "characters\tap50" in out and "fields\tfield_accuracy" in out


def test_eval_order_insensitive(corpus, results, tmp_path, capsys):
    lines = results.read_text().splitlines()
    shuffled = tmp_path / "s.jsonl"
    shuffled.write_text("\n".join(reversed(lines)) + "\n")
    _, a, _ = run(["eval", results, "--truth", corpus / "truth"], capsys)
    _, b, _ = run(["eval", shuffled, "--truth", corpus], capsys)
    assert a == b


def test_eval_id_mismatch(corpus, results, tmp_path, capsys):
    lines = results.read_text().splitlines()
    partial = tmp_path / "p.jsonl"
    partial.write_text("\n".join(lines[1:]) + "\n")
    code, _, err = run(["eval", partial, "--truth", corpus], capsys)
    assert code == 4 and json.loads(lines[0])["source_id"] in err
    dup = tmp_path / "d.jsonl"
    dup.write_text("\n".join(lines + lines[:1]) + "\n")
    assert run(["eval", dup, "--truth", corpus], capsys)[0] == 4
    assert run(["eval", tmp_path / "missing.jsonl", "--truth", corpus], capsys)[0] == 3


def test_run_parallel_is_identical(corpus, results, tmp_path, capsys):
    par = tmp_path / "par.jsonl"
    timings = tmp_path / "t.tsv"
    assert run(["run", corpus, "--out", par, "--workers", 2, "--timings", timings], capsys)[0] == 0
    assert par.read_bytes() == results.read_bytes()
    assert len(timings.read_text().splitlines()) >= 13


def test_run_unregistered_template(corpus, tmp_path, capsys):
    entries = read_manifest(corpus / "manifest.tsv")
    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / "images").symlink_to(corpus / "images")
    from dataclasses import replace

    write_manifest([replace(entries[0], template="parking")] + entries[1:], bad / "manifest.tsv")
    code, _, err = run(["run", bad, "--out", tmp_path / "o.jsonl"], capsys)
    assert code == 4 and "parking" in err
    assert run(["run", tmp_path / "nowhere", "--out", tmp_path / "o.jsonl"], capsys)[0] == 3


def test_gradcheck(capsys):
    code, out, _ = run(["gradcheck", "--losses", "ciou", "--trials", 1000, "--tolerance", 1e-4], capsys)
    assert code == 0 and "ciou" in out
    code, out, _ = run(["gradcheck", "--losses", "giou", "--trials", 50, "--inject-fault"], capsys)
    assert code == 5 and "pred=" in out
    code, out, _ = run(["gradcheck", "--trials", 0], capsys)
    assert code == 0 and "no trials" in out
    assert run(["gradcheck", "--tolerance", 0], capsys)[0] == 2


def test_bench(corpus, tmp_path, capsys):
    report = tmp_path / "b.json"
    code, out, _ = run(["bench", corpus, "--warmup", 1, "--report", report], capsys)
    assert code == 0
    data = json.loads(report.read_text())
    assert data["tickets"] == 12 and data["fps"] > 0
    assert set(data["fps_per_class"]) <= {"I-A", "I-B", "II"} and len(data["fps_per_class"]) >= 2
    tm = data["time_model"]
    assert {"alpha", "beta", "gamma", "t0", "r2"} <= set(tm) and tm["t0"] >= 0


def test_bench_single_template_is_rank_deficient(tmp_path, capsys):
    out = tmp_path / "one"
    assert run(["synth", "--count", 5, "--template", "quota", "--out", out], capsys)[0] == 0
    code, _, err = run(["bench", out, "--warmup", 0], capsys)
    assert code == 6 and "collinear" in err


def test_config_file_and_flag_override(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[gradcheck]\nlosses = iou\n")
    code, out, _ = run(["gradcheck", "--config", cfg, "--trials", 20], capsys)
    assert code == 0 and "\tiou\t" in out and "ciou" not in out
    code, out, _ = run(["gradcheck", "--config", cfg, "--losses", "giou", "--trials", 20], capsys)
    assert code == 0 and "\tgiou\t" in out
    bad = tmp_path / "bad.ini"
    bad.write_text("[nms]\nlucnms_iou = 2\n")
    assert run(["run", tmp_path, "--config", bad, "--out", tmp_path / "x"], capsys)[0] == 2


def test_module_entry_point():
    import subprocess
    import sys

    proc = subprocess.run([sys.executable, "-m", "ticketrec", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("synth", "run", "eval", "gradcheck", "bench"):
        assert cmd in proc.stdout
