"""JSON Lines datasets and batched pipeline execution.

Entries run as independent pipelines with bounded parallelism; each run gets
its own cache scope and ledger, while backend in-flight caps stay global.  A
failing entry is recorded with its partial transcript and the batch carries
on.
"""

from __future__ import annotations

import asyncio
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .backends import Backend
from .model import ModelError, PipelineConfig, QueryContext, RunTranscript
from .pipeline import PipelineRunError, run_async

DEFAULT_PARALLELISM = 4


class DatasetError(ModelError):
    """The dataset file is malformed."""


@dataclass(frozen=True, slots=True)
class DatasetEntry:
    """One benchmark item: an instruction and an optional reference answer."""

    entry_id: str
    instruction: str
    reference: str | None = None

    def __post_init__(self) -> None:
        if not self.entry_id:
            raise DatasetError("entry id must be non-empty")
        if not self.instruction.strip():
            raise DatasetError(f"entry {self.entry_id}: instruction must be non-empty")


def load_dataset(path: str | Path) -> tuple[DatasetEntry, ...]:
    """Parse a JSONL file of {id, instruction, reference?} objects."""
    entries: list[DatasetEntry] = []
    seen: set[str] = set()
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}:{lineno}: not valid JSON: {exc}") from exc
        if not isinstance(doc, dict) or "id" not in doc or "instruction" not in doc:
            raise DatasetError(f"{path}:{lineno}: needs 'id' and 'instruction' fields")
        entry = DatasetEntry(entry_id=str(doc["id"]), instruction=doc["instruction"], reference=doc.get("reference"))
        if entry.entry_id in seen:
            raise DatasetError(f"{path}:{lineno}: duplicate id {entry.entry_id!r}")
        seen.add(entry.entry_id)
        entries.append(entry)
    return tuple(entries)


@dataclass(frozen=True, slots=True)
class EntryResult:
    """Outcome of one dataset entry; failures keep their partial transcript."""

    entry: DatasetEntry
    transcript: RunTranscript
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


async def run_dataset_async(
    entries: Sequence[DatasetEntry],
    config: PipelineConfig,
    backends: Mapping[str, Backend],
    parallelism: int = DEFAULT_PARALLELISM,
) -> tuple[EntryResult, ...]:
    if parallelism < 1:
        raise ModelError(f"parallelism must be >= 1, got {parallelism}")
    gate = asyncio.Semaphore(parallelism)

    async def one(entry: DatasetEntry) -> EntryResult:
        async with gate:
            try:
                transcript = await run_async(QueryContext(query=entry.instruction), config, backends)
                return EntryResult(entry=entry, transcript=transcript)
            except PipelineRunError as exc:
                return EntryResult(entry=entry, transcript=exc.transcript, error=str(exc))

    results = await asyncio.gather(*(one(e) for e in entries))
    return tuple(results)


def run_dataset(
    entries: Sequence[DatasetEntry],
    config: PipelineConfig,
    backends: Mapping[str, Backend],
    parallelism: int = DEFAULT_PARALLELISM,
) -> tuple[EntryResult, ...]:
    return asyncio.run(run_dataset_async(entries, config, backends, parallelism))
