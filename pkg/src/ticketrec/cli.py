"""Command-line front end: synth, run, eval, gradcheck, bench.

Exit codes: 0 ok, 2 configuration error, 3 I/O error, 4 data mismatch,
5 numeric check failure, 6 time-model fit failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .config import KEYS, ConfigError, PipelineConfig, load_config
from .glyphs import GlyphSet, default_glyphs
from .losses import LOSS_KINDS, analytic_gradient, gradient_check
from .metrics_timing import (
    EvaluationError,
    RankDeficientError,
    evaluate_results,
    fit_time_model,
    measure_fps,
)
from .pattern_router import Models, PipelineError, execute_pipeline
from .synth import DEFAULT_MIX, ManifestEntry, generate_corpus, load_ticket_image, read_manifest, read_truth
from .templates import RegistryError, TemplateRegistry, load_registry
from .ticket_model import RecognitionResult, TicketClass

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DATA = 4
EXIT_NUMERIC = 5
EXIT_FIT = 6

log = logging.getLogger("ticketrec")


class CommandError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ------------------------------------------------------------------ helpers


def _registry(cfg: PipelineConfig) -> TemplateRegistry:
    try:
        return load_registry(cfg.templates)
    except RegistryError as exc:
        raise CommandError(EXIT_CONFIG, f"template registry: {exc}") from exc


def _glyphs(cfg: PipelineConfig) -> GlyphSet:
    if cfg.glyphs is None:
        return default_glyphs()
    try:
        return GlyphSet.load(cfg.glyphs)
    except (OSError, ValueError) as exc:
        raise CommandError(EXIT_CONFIG, f"glyph vocabulary: {exc}") from exc


def _models(cfg: PipelineConfig) -> Models:
    return Models.reference(_glyphs(cfg), recognition_threshold=cfg.recognition_threshold)


def _manifest(corpus: Path) -> list[ManifestEntry]:
    try:
        return read_manifest(corpus / "manifest.tsv")
    except OSError as exc:
        raise CommandError(EXIT_IO, f"cannot read manifest: {exc}") from exc
    except (ValueError, IndexError) as exc:
        raise CommandError(EXIT_DATA, f"malformed manifest: {exc}") from exc


def _check_templates(entries: Sequence[ManifestEntry], registry: TemplateRegistry) -> None:
    unknown = sorted({e.template for e in entries if e.template not in registry})
    if unknown:
        offenders = [e.id for e in entries if e.template in unknown]
        raise CommandError(
            EXIT_DATA,
            f"unregistered template(s): {', '.join(unknown)} (tickets: {', '.join(offenders)})",
        )


# worker-process state, set once per process by the pool initializer
_WORKER: dict[str, Any] = {}


def _init_worker(registry: TemplateRegistry, models: Models, settings: Any, corpus: str) -> None:
    _WORKER.update(registry=registry, models=models, settings=settings, corpus=corpus)


def _process(entry: ManifestEntry):
    w = _WORKER
    image = load_ticket_image(w["corpus"], entry.id)
    try:
        return execute_pipeline(image, entry.template, w["registry"], w["models"], w["settings"], entry.id)
    except PipelineError as exc:
        cls = TicketClass(entry.ticket_class) if entry.ticket_class in TicketClass._value2member_map_ else TicketClass.I_A
        return RecognitionResult(entry.id, cls, {}, (f"pipeline error: {exc}",)), None


def _run_all(cfg: PipelineConfig, corpus: Path, entries: Sequence[ManifestEntry], workers: int):
    registry = _registry(cfg)
    models = _models(cfg)
    settings = cfg.settings()
    args = (registry, models, settings, str(corpus))
    try:
        if workers == 1:
            _init_worker(*args)
            out = [_process(e) for e in entries]
        else:
            with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=args) as pool:
                out = list(pool.map(_process, entries, chunksize=max(1, len(entries) // (4 * workers))))
    except OSError as exc:
        raise CommandError(EXIT_IO, f"cannot read ticket image: {exc}") from exc
    return out


def _write_text(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise CommandError(EXIT_IO, f"cannot write {path}: {exc}") from exc


def _parse_mix(text: str) -> tuple[float, ...]:
    if text == "default":
        return DEFAULT_MIX
    try:
        mix = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise CommandError(EXIT_CONFIG, f"bad --mix {text!r}; use 'default' or 'p_fixed,p_free'") from None
    if len(mix) != 2:
        raise CommandError(EXIT_CONFIG, "--mix needs two proportions: fixed-form,free-form")
    return mix


# ----------------------------------------------------------------- commands


def cmd_synth(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    registry = _registry(cfg)
    out = Path(args.out)
    mix = _parse_mix(args.mix)
    if args.template and args.mix == "default":
        # the default mix only spans families the selected templates cover
        try:
            chosen = [registry[t] for t in args.template]
        except KeyError as exc:
            raise CommandError(EXIT_CONFIG, f"unknown template {exc}") from None
        mix = tuple(p if any(t.fixed == is_fixed for t in chosen) else 0.0 for p, is_fixed in zip(mix, (True, False)))
        mix = tuple(p / sum(mix) for p in mix)
    try:
        entries = generate_corpus(
            registry, out, args.count, cfg.seed, mix, args.template or None,
            sigma=args.sigma, max_shift=args.max_shift, glyphs=_glyphs(cfg),
        )
    except (KeyError, ValueError) as exc:
        raise CommandError(EXIT_CONFIG, str(exc)) from exc
    except OSError as exc:
        raise CommandError(EXIT_IO, f"cannot write corpus to {out}: {exc}") from exc
    counts: dict[str, int] = {}
    for e in entries:
        counts[e.ticket_class] = counts.get(e.ticket_class, 0) + 1
    print(f"wrote {len(entries)} tickets to {out}: " + ", ".join(f"{k}={v}" for k, v in sorted(counts.items())))
    return EXIT_OK


def cmd_run(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    corpus = Path(args.corpus)
    entries = _manifest(corpus)
    _check_templates(entries, _registry(cfg))
    outputs = _run_all(cfg, corpus, entries, cfg.workers)
    results = sorted((r for r, _ in outputs), key=lambda r: r.source_id)
    _write_text(Path(args.out), "".join(r.to_json() + "\n" for r in results))
    traces = [t for _, t in outputs if t is not None]
    if args.timings:
        lines = ["id\tstage\tseconds"]
        for e, (_, t) in zip(entries, outputs):
            if t is not None:
                lines += [f"{e.id}\t{k}\t{v:.6f}" for k, v in t.stage_times.items()]
        _write_text(Path(args.timings), "\n".join(lines) + "\n")
    stage_totals: dict[str, float] = {}
    for t in traces:
        for k, v in t.stage_times.items():
            stage_totals[k] = stage_totals.get(k, 0.0) + v
    for k, v in stage_totals.items():
        log.info("stage %s: %.3f s total", k, v)
    failed = sum(1 for r in results if any(w.startswith("pipeline error") for w in r.warnings))
    print(f"recognised {len(results)} tickets -> {args.out}" + (f" ({failed} failed)" if failed else ""))
    return EXIT_OK


def _read_results(path: Path) -> list[RecognitionResult]:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CommandError(EXIT_IO, f"cannot read results: {exc}") from exc
    try:
        return [RecognitionResult.from_dict(json.loads(line)) for line in text.splitlines() if line.strip()]
    except (ValueError, KeyError, TypeError) as exc:
        raise CommandError(EXIT_DATA, f"malformed results file: {exc}") from exc


def _read_truths(truth_dir: Path) -> dict[str, dict[str, tuple[str, tuple]]]:
    if (truth_dir / "truth").is_dir():
        truth_dir = truth_dir / "truth"
    if not truth_dir.is_dir():
        raise CommandError(EXIT_IO, f"truth directory not found: {truth_dir}")
    try:
        return {
            p.stem: {k.value: v for k, v in read_truth(p).items()} for p in sorted(truth_dir.glob("*.tsv"))
        }
    except OSError as exc:
        raise CommandError(EXIT_IO, f"cannot read truth: {exc}") from exc
    except ValueError as exc:
        raise CommandError(EXIT_DATA, f"malformed truth file: {exc}") from exc


def format_report_tsv(report: dict) -> str:
    lines = ["section\tmetric\tvalue"]
    lines.append(f"summary\ttickets\t{report['tickets']}")
    for key in ("char_ap50", "char_recall", "char_accuracy"):
        lines.append(f"characters\t{key}\t{report[key]:.6f}")
    for cls, ap in report["char_ap50_per_class"].items():
        lines.append(f"characters\tap50[{cls}]\t{ap:.6f}")
    for key in ("field_ap50", "field_recall", "field_accuracy"):
        lines.append(f"fields\t{key}\t{report[key]:.6f}")
    for cls, ap in report["field_ap50_per_class"].items():
        lines.append(f"fields\tap50[{cls}]\t{ap:.6f}")
    return "\n".join(lines) + "\n"


def cmd_eval(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    results = _read_results(Path(args.results))
    truths = _read_truths(Path(args.truth))
    ids = [r.source_id for r in results]
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    if dupes:
        raise CommandError(EXIT_DATA, f"duplicate result ids: {', '.join(dupes)}")
    try:
        report = evaluate_results(results, truths)
    except EvaluationError as exc:
        raise CommandError(EXIT_DATA, f"id mismatch: {exc}") from exc
    sys.stdout.write(format_report_tsv(report))
    if args.report:
        _write_text(Path(args.report), json.dumps(report, indent=2, sort_keys=True, ensure_ascii=False) + "\n")
    return EXIT_OK


def _corrupted_gradient(kind, pred, gt, v_form="squared"):
    return analytic_gradient(kind, pred, gt, v_form=v_form) * 1.01


def cmd_gradcheck(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    if args.tolerance <= 0 or args.epsilon <= 0:
        raise CommandError(EXIT_CONFIG, "tolerance and epsilon must be positive")
    if args.trials < 0:
        raise CommandError(EXIT_CONFIG, "trials must be >= 0")
    losses = list(cfg.losses)
    if not losses:
        raise CommandError(EXIT_CONFIG, f"gradcheck needs at least one of {LOSS_KINDS}")
    if args.trials == 0:
        print("warning: no trials requested; nothing checked")
        return EXIT_OK
    analytic = _corrupted_gradient if args.inject_fault else analytic_gradient
    ok = True
    for kind in losses:
        rep = gradient_check(kind, args.trials, cfg.seed, args.epsilon, args.tolerance,
                             analytic=analytic, v_form=cfg.v_form)
        status = "PASS" if rep.ok else "FAIL"
        print(f"{status}\t{kind}\tchecked={rep.checked}\tskipped={rep.skipped}\tworst={rep.worst:.3e}")
        for pred, gt, err in rep.failures[:5]:
            print(f"  mismatch {kind}: pred={pred.tolist()} gt={gt.tolist()} rel_err={err:.3e}")
        ok &= rep.ok
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_bench(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    corpus = Path(args.corpus)
    entries = _manifest(corpus)
    registry = _registry(cfg)
    _check_templates(entries, registry)
    if not entries:
        raise CommandError(EXIT_DATA, "corpus is empty")
    models, settings = _models(cfg), cfg.settings()
    try:
        images = {e.id: load_ticket_image(corpus, e.id) for e in entries}
    except OSError as exc:
        raise CommandError(EXIT_IO, f"cannot read ticket image: {exc}") from exc

    def run_one(e: ManifestEntry):
        return execute_pipeline(images[e.id], e.template, registry, models, settings, e.id)[1]

    rep = measure_fps(run_one, entries, warmup=args.warmup)
    by_class: dict[str, list[float]] = {}
    for e, t in zip(entries, rep.per_ticket):
        by_class.setdefault(e.ticket_class, []).append(t)
    report: dict[str, Any] = {
        "tickets": rep.count,
        "fps": rep.fps,
        "fps_per_class": {k: len(v) / sum(v) for k, v in sorted(by_class.items())},
        "mean_stage_seconds": dict(rep.mean_stage_times),
    }
    if "workers" in cfg.explicit and cfg.workers > 1:
        t0 = time.perf_counter()
        _run_all(cfg, corpus, entries, cfg.workers)
        report["parallel"] = {"workers": cfg.workers, "fps": len(entries) / (time.perf_counter() - t0)}
    try:
        fit = fit_time_model(rep.observations)
    except RankDeficientError as exc:
        print(json.dumps(report, indent=2, sort_keys=True))
        raise CommandError(EXIT_FIT, f"time model fit failed: {exc}") from exc
    report["time_model"] = {
        "alpha": fit.model.alpha, "beta": fit.model.beta, "gamma": fit.model.gamma, "t0": fit.model.t0,
        "r2": fit.r2, "constant_clamped_to_zero": fit.constrained,
    }
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.report:
        _write_text(Path(args.report), text + "\n")
    return EXIT_OK


# ------------------------------------------------------------------- parser


def _common(with_defaults: bool) -> argparse.ArgumentParser:
    """Global flags plus one override flag per configuration key."""
    p = argparse.ArgumentParser(add_help=False, argument_default=None if with_defaults else argparse.SUPPRESS)
    p.add_argument("--config", metavar="PATH", help="configuration file (INI sections, key = value)")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--workers", type=int, help="worker processes")
    for key in KEYS:
        if key in ("seed", "workers"):
            continue
        flags = [f"--{key.replace('_', '-')}"] + ([f"--{key}"] if "_" in key else [])
        p.add_argument(*flags, dest=key, metavar="VALUE", help=f"override [{KEYS[key][0]}] {key}")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ticketrec", description=__doc__, parents=[_common(True)],
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-stage timings")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common(False)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic ticket corpus")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--mix", default="default", help="'default' or 'p_fixed,p_free'")
    p.add_argument("--template", action="append", help="restrict to this template id (repeatable)")
    p.add_argument("--sigma", type=float, default=0.0, help="Gaussian intensity noise")
    p.add_argument("--max-shift", type=int, default=0, help="largest random translation in pixels")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("run", parents=[common], help="recognise every ticket of a corpus")
    p.add_argument("corpus")
    p.add_argument("--out", required=True, help="results file (JSON lines, sorted by id)")
    p.add_argument("--timings", help="optional per-stage timing table")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", parents=[common], help="score a results file against planted truth")
    p.add_argument("results")
    p.add_argument("--truth", required=True, help="corpus directory or its truth/ directory")
    p.add_argument("--report", help="also write the report as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="compare loss gradients with finite differences")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--epsilon", type=float, default=1e-6)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", parents=[common], help="measure throughput and fit the time model")
    p.add_argument("corpus")
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--report", help="also write the report as JSON")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    overrides = {k: getattr(args, k, None) for k in KEYS}
    try:
        cfg = load_config(args.config, overrides)
        return args.func(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
