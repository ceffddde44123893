"""Command-line front end: single runs, dataset batches, sweeps, judging, reports."""

from __future__ import annotations

import argparse
import dataclasses
import itertools
import logging
import sys
from pathlib import Path
from typing import Sequence

from .accounting import CostReport, summarize_costs
from .backends import Backend, HttpBackend, MockBackend, RecordingBackend, ReplayBackend
from .calls import StageError
from .config import ConfigError, RunSetup, default_roster, default_setup, load_config
from .datasets import DEFAULT_PARALLELISM, DatasetError, load_dataset, run_dataset
from .judge import JudgeError, judge_pairs, load_answers, pair_answers
from .model import (
    AttentionMode,
    ModelError,
    PipelineConfig,
    QueryContext,
    RunTranscript,
    canonical_json,
)
from .pipeline import PipelineRunError, run
from .report import build_report, load_transcripts, write_report

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUN_FAILURE = 2
EXIT_PARTIAL_FAILURE = 3


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; this surface reserves 2 for run failures."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_pipeline_flags(parser: argparse.ArgumentParser) -> None:
    """Flags shared by run, dataset, and sweep; each maps onto one config field."""
    parser.add_argument("--config", help="manifest file defining roster, backends, and defaults")
    parser.add_argument("--backend", choices=["mock", "http"], default="mock",
                        help="backend kind for config-less runs (default: mock)")
    parser.add_argument("--base-url", help="chat endpoint root, required with --backend http")
    parser.add_argument("--agents-n", type=int, default=3, metavar="N",
                        help="collaborative seats in the config-less roster (default: 3)")
    parser.add_argument("--seed", type=int, default=None, help="config.seed; also reseeds mock backends")
    parser.add_argument("--layers", type=int, default=None, help="config.layers")
    parser.add_argument("--attention", choices=[m.value for m in AttentionMode], default=None,
                        help="config.mode")
    parser.add_argument("--early-stop", action="store_true", default=None,
                        help="config.early_stopping = true")
    parser.add_argument("--no-cache", action="store_true",
                        help="config.caching_enabled = false")
    parser.add_argument("--cache-factor", type=float, default=None, metavar="F",
                        help="config.cache_hit_cost_factor, 0..1")
    parser.add_argument("--tokenizer", default=None, help="config.tokenizer")
    parser.add_argument("--max-in-flight", type=int, default=None, help="config.max_in_flight")
    parser.add_argument("--deadline", type=float, default=None, help="config.deadline, seconds")
    parser.add_argument("--mean-tokens", type=float, default=300.0,
                        help="mock completion length mean (default: 300)")
    parser.add_argument("--std-tokens", type=float, default=60.0,
                        help="mock completion length spread (default: 60)")


def _base_setup(args: argparse.Namespace) -> RunSetup:
    if args.config:
        return load_config(args.config)
    if args.backend == "http":
        if not args.base_url:
            raise ConfigError("--backend http requires --base-url")
        backend: Backend = HttpBackend("http", base_url=args.base_url)
        config = PipelineConfig(roster=default_roster(args.agents_n, backend="http"))
        return RunSetup(config=config, backends={"http": backend})
    return default_setup(
        n_collaborators=args.agents_n,
        seed=args.seed if args.seed is not None else 0,
        mean_tokens=args.mean_tokens,
        std_tokens=args.std_tokens,
    )


def _apply_overrides(setup: RunSetup, args: argparse.Namespace) -> RunSetup:
    """Fold explicit flags into the loaded config; unset flags leave it alone."""
    config = setup.config
    updates: dict = {}
    if args.layers is not None:
        updates["layers"] = args.layers
    if args.attention is not None:
        updates["mode"] = AttentionMode(args.attention)
    if args.early_stop is not None:
        updates["early_stopping"] = args.early_stop
    if args.no_cache:
        updates["caching_enabled"] = False
    if args.cache_factor is not None:
        updates["cache_hit_cost_factor"] = args.cache_factor
    if args.tokenizer is not None:
        updates["tokenizer"] = args.tokenizer
    if args.max_in_flight is not None:
        updates["max_in_flight"] = args.max_in_flight
    if args.deadline is not None:
        updates["deadline"] = args.deadline
    backends = dict(setup.backends)
    if args.seed is not None:
        updates["seed"] = args.seed
        for name, backend in backends.items():
            if isinstance(backend, MockBackend):
                backends[name] = MockBackend(
                    name,
                    seed=args.seed,
                    length=backend.length,
                    tokenizer=backend.tokenizer,
                    max_in_flight=backend.max_in_flight,
                    retry=backend.retry,
                )
    if updates:
        config = dataclasses.replace(config, **updates)
    return RunSetup(config=config, backends=backends, judge_agent=setup.judge_agent)


def _load_setup(args: argparse.Namespace) -> RunSetup:
    return _apply_overrides(_base_setup(args), args)


def _write_transcript(transcript: RunTranscript, path: str | None) -> None:
    if path:
        Path(path).write_text(transcript.to_json(), encoding="utf-8")


def _cost_line(report: CostReport) -> str:
    return (
        f"calls: {report.total_calls}, prompt tokens: {report.total_prompt_tokens}, "
        f"cached: {report.total_cached_prompt_tokens}, completion: {report.total_completion_tokens}, "
        f"effective: {report.total_effective_tokens:g}"
    )


def _save_recording(recorders: dict[str, RecordingBackend], path: str) -> None:
    entries = [entry for name in sorted(recorders) for entry in recorders[name].entries]
    Path(path).write_text(canonical_json(entries), encoding="utf-8")


def cmd_run(args: argparse.Namespace) -> int:
    setup = _load_setup(args)
    backends: dict[str, Backend] = dict(setup.backends)
    if args.replay:
        backends = {name: ReplayBackend(name, args.replay) for name in backends}
    recorders: dict[str, RecordingBackend] | None = None
    if args.record:
        recorders = {name: RecordingBackend(b) for name, b in backends.items()}
        backends = dict(recorders)

    ctx = QueryContext(query=args.query)
    try:
        transcript = run(ctx, setup.config, backends)
    except PipelineRunError as exc:
        _write_transcript(exc.transcript, args.out)
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUN_FAILURE
    _write_transcript(transcript, args.out)
    if recorders is not None:
        _save_recording(recorders, args.record)
    print(transcript.final_output)
    print(_cost_line(summarize_costs([transcript])), file=sys.stderr)
    return EXIT_OK


def _entry_filename(entry_id: str) -> str:
    safe = "".join(c if c.isalnum() or c in "-_." else "_" for c in entry_id)
    return f"{safe}.json"


def cmd_dataset(args: argparse.Namespace) -> int:
    setup = _load_setup(args)
    entries = load_dataset(args.dataset)
    results = run_dataset(entries, setup.config, setup.backends, parallelism=args.parallelism)

    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    transcripts = []
    failures = []
    for result in results:
        (outdir / _entry_filename(result.entry.entry_id)).write_text(
            result.transcript.to_json(), encoding="utf-8"
        )
        transcripts.append(result.transcript)
        if not result.ok:
            failures.append((result.entry.entry_id, result.error))

    report = build_report(transcripts)
    write_report(report, outdir)
    print(f"entries: {len(results)}, failed: {len(failures)}")
    print(_cost_line(report.cost), file=sys.stderr)
    for entry_id, error in failures:
        print(f"failed {entry_id}: {error}", file=sys.stderr)
    return EXIT_PARTIAL_FAILURE if failures else EXIT_OK


def cmd_judge(args: argparse.Namespace) -> int:
    if args.config:
        setup = load_config(args.config)
        if setup.judge_agent is None:
            raise ConfigError(f"{args.config} declares no judge seat")
    else:
        setup = default_setup(seed=args.seed if args.seed is not None else 0)
    assert setup.judge_agent is not None

    side_a = load_answers(args.answers_a)
    side_b = load_answers(args.answers_b)
    pairs = pair_answers(side_a, side_b)
    try:
        judged = judge_pairs(pairs, setup.judge_agent, setup.backends)
    except StageError as exc:
        print(f"judging failed: {exc}", file=sys.stderr)
        return EXIT_RUN_FAILURE
    if args.out:
        Path(args.out).write_text(judged.to_json(), encoding="utf-8")
    print(judged.summary_line())
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    transcripts, skipped = load_transcripts(args.transcripts)
    report = build_report(transcripts, skipped_files=skipped)
    write_report(report, args.outdir if args.outdir else args.transcripts)
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    es_axis = [flag == "on" for flag in args.early_stop]
    transcripts = []
    failed = 0
    for n, layers, mode_name, es in itertools.product(args.agents_n, args.layers, args.attention, es_axis):
        setup = default_setup(
            n_collaborators=n,
            layers=layers,
            mode=AttentionMode(mode_name),
            early_stopping=es,
            seed=args.seed,
            mean_tokens=args.mean_tokens,
            std_tokens=args.std_tokens,
        )
        name = f"n{n}_l{layers}_{mode_name}_es{int(es)}.json"
        try:
            transcript = run(QueryContext(query=args.query), setup.config, setup.backends)
        except PipelineRunError as exc:
            transcript = exc.transcript
            failed += 1
            print(f"failed {name}: {exc}", file=sys.stderr)
        (outdir / name).write_text(transcript.to_json(), encoding="utf-8")
        transcripts.append(transcript)

    report = build_report(transcripts)
    write_report(report, outdir)
    print(report.to_text(), end="")
    return EXIT_RUN_FAILURE if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="attnmoa", description="Layered multi-agent pipeline runner.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one query through the pipeline")
    _add_pipeline_flags(p_run)
    p_run.add_argument("--query", required=True, help="the user query")
    p_run.add_argument("--out", help="transcript output path")
    p_run.add_argument("--record", help="capture every backend result into this fixture file")
    p_run.add_argument("--replay", help="serve all backend calls from this fixture file")
    p_run.set_defaults(func=cmd_run)

    p_ds = sub.add_parser("dataset", help="run every entry of a JSONL dataset")
    _add_pipeline_flags(p_ds)
    p_ds.add_argument("dataset", help="JSONL file of {id, instruction, reference?}")
    p_ds.add_argument("--outdir", required=True, help="directory for transcripts and reports")
    p_ds.add_argument("--parallelism", type=int, default=DEFAULT_PARALLELISM,
                      help=f"entries in flight at once (default: {DEFAULT_PARALLELISM})")
    p_ds.set_defaults(func=cmd_dataset)

    p_judge = sub.add_parser("judge", help="pairwise-judge two answer files")
    p_judge.add_argument("answers_a", help="JSONL file of {id, output} for side A")
    p_judge.add_argument("answers_b", help="JSONL file of {id, output} for side B")
    p_judge.add_argument("--config", help="manifest declaring a judge seat")
    p_judge.add_argument("--seed", type=int, default=None, help="seed for the default mock judge")
    p_judge.add_argument("--out", help="verdict JSON output path")
    p_judge.set_defaults(func=cmd_judge)

    p_rep = sub.add_parser("report", help="aggregate saved transcripts into cost tables")
    p_rep.add_argument("transcripts", help="directory of transcript JSON files")
    p_rep.add_argument("--outdir", help="where to write report files (default: the input directory)")
    p_rep.set_defaults(func=cmd_report)

    p_sweep = sub.add_parser("sweep", help="mock-backed cartesian sweep over pipeline shapes")
    p_sweep.add_argument("--agents-n", type=int, nargs="+", default=[2, 3, 4], metavar="N",
                         help="collaborative seat counts (default: 2 3 4)")
    p_sweep.add_argument("--layers", type=int, nargs="+", default=[1, 2, 3],
                         help="depths (default: 1 2 3)")
    p_sweep.add_argument("--attention", nargs="+", choices=[m.value for m in AttentionMode],
                         default=[m.value for m in AttentionMode],
                         help="attention modes (default: both)")
    p_sweep.add_argument("--early-stop", nargs="+", choices=["off", "on"], default=["off"],
                         help="early-stopping axis (default: off)")
    p_sweep.add_argument("--seed", type=int, default=0)
    p_sweep.add_argument("--query", default="Summarize the trade-offs of layered agent pipelines.")
    p_sweep.add_argument("--mean-tokens", type=float, default=300.0)
    p_sweep.add_argument("--std-tokens", type=float, default=60.0)
    p_sweep.add_argument("--outdir", required=True, help="directory for transcripts and reports")
    p_sweep.set_defaults(func=cmd_sweep)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DatasetError, JudgeError, ModelError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
