"""Rollups over saved transcripts: cost tables, depth curves, stop histogram."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

from .accounting import CostReport, summarize_costs
from .model import RunTranscript, canonical_json

log = logging.getLogger(__name__)


def load_transcripts(directory: str | Path) -> tuple[list[RunTranscript], list[str]]:
    """Read every *.json transcript in a directory; skip unreadable ones.

    report.json is this tool's own output and is never treated as a transcript.
    """
    transcripts: list[RunTranscript] = []
    skipped: list[str] = []
    for path in sorted(Path(directory).glob("*.json")):
        if path.name == "report.json":
            continue
        try:
            transcripts.append(RunTranscript.from_json(path.read_text(encoding="utf-8")))
        except (ValueError, KeyError, TypeError) as exc:
            log.warning("skipping %s: %s", path, exc)
            skipped.append(str(path))
    return transcripts, skipped


@dataclass(frozen=True, slots=True)
class DepthRow:
    """Aggregate cost of all runs sharing one configured depth."""

    layers: int
    runs: int
    calls: int
    raw_tokens: int
    cached_tokens: int
    effective_tokens: float


@dataclass(frozen=True, slots=True)
class Report:
    """Everything cmd_report emits, assembled in memory first."""

    cost: CostReport
    by_depth: tuple[DepthRow, ...]
    failed_runs: int
    skipped_files: tuple[str, ...] = ()

    def depth_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layers", "runs", "calls", "raw_tokens", "cached_tokens", "effective_tokens"])
        for row in self.by_depth:
            writer.writerow(
                [row.layers, row.runs, row.calls, row.raw_tokens, row.cached_tokens, f"{row.effective_tokens:g}"]
            )
        return buf.getvalue()

    def to_doc(self) -> dict[str, Any]:
        return {
            "cost": self.cost.to_doc(),
            "by_depth": [
                {
                    "layers": r.layers,
                    "runs": r.runs,
                    "calls": r.calls,
                    "raw_tokens": r.raw_tokens,
                    "cached_tokens": r.cached_tokens,
                    "effective_tokens": r.effective_tokens,
                }
                for r in self.by_depth
            ],
            "failed_runs": self.failed_runs,
            "skipped_files": list(self.skipped_files),
        }

    def to_json(self) -> str:
        return canonical_json(self.to_doc())

    def to_text(self) -> str:
        lines = [self.cost.to_text().rstrip("\n")]
        if self.by_depth:
            lines.append("per-depth totals:")
            for r in self.by_depth:
                lines.append(
                    f"  L={r.layers}: {r.runs} runs, {r.calls} calls, "
                    f"{r.raw_tokens} raw tokens, {r.effective_tokens:g} effective"
                )
        if self.failed_runs:
            lines.append(f"failed runs: {self.failed_runs}")
        if self.skipped_files:
            lines.append(f"skipped files: {len(self.skipped_files)}")
        return "\n".join(lines) + "\n"


def build_report(transcripts: Sequence[RunTranscript], skipped_files: Sequence[str] = ()) -> Report:
    cost = summarize_costs(transcripts)
    by_depth: dict[int, list[RunTranscript]] = {}
    for t in transcripts:
        by_depth.setdefault(t.config.layers, []).append(t)
    rows = []
    for layers in sorted(by_depth):
        group = by_depth[layers]
        group_cost = summarize_costs(group)
        rows.append(
            DepthRow(
                layers=layers,
                runs=len(group),
                calls=group_cost.total_calls,
                raw_tokens=group_cost.total_raw_tokens,
                cached_tokens=group_cost.total_cached_prompt_tokens,
                effective_tokens=group_cost.total_effective_tokens,
            )
        )
    failed = sum(1 for t in transcripts if t.status != "ok")
    return Report(cost=cost, by_depth=tuple(rows), failed_runs=failed, skipped_files=tuple(skipped_files))


def write_report(report: Report, outdir: str | Path) -> list[Path]:
    """Write report.json, report.csv, and depth.csv; return the paths."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "report.json", out / "report.csv", out / "depth.csv"]
    paths[0].write_text(report.to_json(), encoding="utf-8")
    paths[1].write_text(report.cost.to_csv(), encoding="utf-8")
    paths[2].write_text(report.depth_csv(), encoding="utf-8")
    return paths
