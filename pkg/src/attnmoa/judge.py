"""Pairwise answer judging with position-swapped double calls.

Judges favor whichever response they read first often enough to matter, so
every pair is judged twice with the candidates swapped.  A candidate wins
only when both orderings pick it; anything else is a tie.  Swapping the two
input files therefore flips A/B labels but never changes who wins.
"""

from __future__ import annotations

import asyncio
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

from .accounting import CacheModel
from .backends import Backend
from .calls import CallPlan, Dispatcher
from .model import AgentSpec, CallRecord, ModelError, Phase, canonical_json
from .templates import render_judge


class JudgeError(ModelError):
    """Answer files are malformed or cannot be paired."""


@dataclass(frozen=True, slots=True)
class AnswerEntry:
    """One candidate answer keyed by dataset entry id."""

    entry_id: str
    output: str
    instruction: str | None = None


def load_answers(path: str | Path) -> tuple[AnswerEntry, ...]:
    """Parse a JSONL file of {id, output, instruction?} objects."""
    entries: list[AnswerEntry] = []
    seen: set[str] = set()
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as exc:
            raise JudgeError(f"{path}:{lineno}: not valid JSON: {exc}") from exc
        if not isinstance(doc, dict) or "id" not in doc or "output" not in doc:
            raise JudgeError(f"{path}:{lineno}: needs 'id' and 'output' fields")
        entry_id = str(doc["id"])
        if entry_id in seen:
            raise JudgeError(f"{path}:{lineno}: duplicate id {entry_id!r}")
        seen.add(entry_id)
        entries.append(AnswerEntry(entry_id=entry_id, output=doc["output"], instruction=doc.get("instruction")))
    return tuple(entries)


@dataclass(frozen=True, slots=True)
class AnswerPair:
    pair_id: str
    instruction: str
    answer_a: str
    answer_b: str


def pair_answers(side_a: Sequence[AnswerEntry], side_b: Sequence[AnswerEntry]) -> tuple[AnswerPair, ...]:
    """Match the two answer sets by id; every id must appear on both sides."""
    by_id_b = {e.entry_id: e for e in side_b}
    missing_in_b = [e.entry_id for e in side_a if e.entry_id not in by_id_b]
    missing_in_a = sorted(set(by_id_b) - {e.entry_id for e in side_a})
    if missing_in_b or missing_in_a:
        raise JudgeError(f"unpaired ids: only in A {missing_in_b}, only in B {missing_in_a}")
    pairs = []
    for a in side_a:
        b = by_id_b[a.entry_id]
        instruction = a.instruction or b.instruction
        if not instruction:
            raise JudgeError(f"pair {a.entry_id}: neither side carries the instruction text")
        pairs.append(AnswerPair(pair_id=a.entry_id, instruction=instruction, answer_a=a.output, answer_b=b.output))
    return tuple(pairs)


_VERDICT_RE = re.compile(r"\[\[([ABC])\]\]")


def parse_verdict(text: str) -> str | None:
    """Last [[A]]/[[B]]/[[C]] token in the completion, or None."""
    matches = _VERDICT_RE.findall(text)
    return matches[-1] if matches else None


@dataclass(frozen=True, slots=True)
class JudgeVerdict:
    """Final decision for one pair plus both raw orderings.

    first_pass and swapped_pass are already mapped back to the original A/B
    labels; an unparseable completion counts as a tie for that leg.
    """

    pair_id: str
    winner: str
    first_pass: str
    swapped_pass: str
    rationale: str

    def __post_init__(self) -> None:
        for value in (self.winner, self.first_pass, self.swapped_pass):
            if value not in ("A", "B", "tie"):
                raise ModelError(f"verdict label must be A, B, or tie, got {value!r}")

    def to_doc(self) -> dict[str, Any]:
        return {
            "pair_id": self.pair_id,
            "winner": self.winner,
            "first_pass": self.first_pass,
            "swapped_pass": self.swapped_pass,
            "rationale": self.rationale,
        }


def _leg_pick(raw: str | None, first_label: str, second_label: str) -> str:
    """Map a leg's [[A]]/[[B]]/[[C]] onto the original candidate labels."""
    if raw == "A":
        return first_label
    if raw == "B":
        return second_label
    return "tie"


def merge_legs(first: str, swapped: str) -> str:
    """A candidate wins only when both orderings agree on it."""
    return first if first == swapped and first != "tie" else "tie"


@dataclass(frozen=True, slots=True)
class JudgeRun:
    """All verdicts of one judging session plus its call ledger."""

    verdicts: tuple[JudgeVerdict, ...]
    calls: tuple[CallRecord, ...]

    @property
    def wins_a(self) -> int:
        return sum(1 for v in self.verdicts if v.winner == "A")

    @property
    def wins_b(self) -> int:
        return sum(1 for v in self.verdicts if v.winner == "B")

    @property
    def ties(self) -> int:
        return sum(1 for v in self.verdicts if v.winner == "tie")

    def summary_line(self) -> str:
        n = len(self.verdicts)
        return f"pairs: {n}, A wins: {self.wins_a}, B wins: {self.wins_b}, ties: {self.ties}"

    def to_doc(self) -> dict[str, Any]:
        return {
            "verdicts": [v.to_doc() for v in self.verdicts],
            "summary": {"pairs": len(self.verdicts), "wins_a": self.wins_a, "wins_b": self.wins_b, "ties": self.ties},
        }

    def to_json(self) -> str:
        return canonical_json(self.to_doc())


async def judge_pairs_async(
    pairs: Sequence[AnswerPair],
    judge: AgentSpec,
    backends: Mapping[str, Backend],
) -> JudgeRun:
    """Judge every pair twice (original and swapped order) in one stage."""
    dispatcher = Dispatcher(backends, CacheModel())
    plans: list[CallPlan] = []
    for pair in pairs:
        plans.append(
            CallPlan(phase=Phase.JUDGE, layer=0, agent=judge, prompt=render_judge(pair.instruction, pair.answer_a, pair.answer_b))
        )
        plans.append(
            CallPlan(phase=Phase.JUDGE, layer=0, agent=judge, prompt=render_judge(pair.instruction, pair.answer_b, pair.answer_a))
        )
    records = await dispatcher.run_stage(plans)
    verdicts = []
    for i, pair in enumerate(pairs):
        first_record, swapped_record = records[2 * i], records[2 * i + 1]
        first = _leg_pick(parse_verdict(first_record.response), "A", "B")
        swapped = _leg_pick(parse_verdict(swapped_record.response), "B", "A")
        verdicts.append(
            JudgeVerdict(
                pair_id=pair.pair_id,
                winner=merge_legs(first, swapped),
                first_pass=first,
                swapped_pass=swapped,
                rationale=first_record.response + "\n---\n" + swapped_record.response,
            )
        )
    return JudgeRun(verdicts=tuple(verdicts), calls=tuple(dispatcher.calls))


def judge_pairs(pairs: Sequence[AnswerPair], judge: AgentSpec, backends: Mapping[str, Backend]) -> JudgeRun:
    return asyncio.run(judge_pairs_async(pairs, judge, backends))
