"""Domain types shared across the engine.

Everything here is a plain frozen dataclass or enum with no behaviour beyond
validation and (de)serialization, so the orchestration modules can pass these
values around without caring which backend produced them.  The run transcript
defined at the bottom is the single durable artifact of a run and must
serialize to canonical JSON: sorted keys, two-space indent, raw UTF-8, one
trailing newline.  Two runs with the same inputs must produce byte-identical
transcript files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import Any, Iterable, Sequence

SCHEMA_VERSION = 1

# Collaborative agents answer and critique; the summary agent folds a layer's
# refined answers into one text; the residual agent folds layer summaries
# across layers into the running answer.
MIN_COLLABORATORS = 2


class ModelError(ValueError):
    """A domain value failed validation."""


class RosterError(ModelError):
    """An agent roster failed a structural requirement."""


class TranscriptError(ModelError):
    """A transcript document could not be decoded."""


class Role(str, Enum):
    COLLABORATIVE = "collaborative"
    SUMMARY = "summary"
    RESIDUAL = "residual"
    JUDGE = "judge"


class Stage(str, Enum):
    INITIAL = "initial"
    REFINED = "refined"


class AttentionMode(str, Enum):
    """How cross-attention fans out within a layer.

    PAIRWISE issues one call per ordered (advisor, recipient) pair, so a layer
    costs N*(N-1) cross calls plus N self calls.  SINGLEPASS issues one call
    per advisor covering all peers at once, so a layer costs N cross calls
    plus N self calls.
    """

    PAIRWISE = "pairwise"
    SINGLEPASS = "singlepass"


class AttentionKind(str, Enum):
    SELF = "self"
    CROSS = "cross"


class LayerKind(str, Enum):
    ATTENTION_SUMMARY = "attention_summary"
    RESIDUAL_SYNTHESIS = "residual_synthesis"


class Phase(str, Enum):
    """Which stage of the run a backend call belongs to."""

    SAMPLING = "sampling"
    ATTENTION = "attention"
    AGGREGATION = "aggregation"
    SUMMARIZATION = "summarization"
    RESIDUAL = "residual"
    JUDGE = "judge"


_HISTORY_ROLES = ("user", "assistant")


@dataclass(frozen=True, slots=True)
class QueryContext:
    """Prior conversation turns plus the latest user query."""

    query: str
    history: tuple[tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        if not self.query.strip():
            raise ModelError("query must be non-empty")
        object.__setattr__(self, "history", tuple((str(r), str(t)) for r, t in self.history))
        for i, (role, _) in enumerate(self.history):
            if role not in _HISTORY_ROLES:
                raise ModelError(f"history role must be 'user' or 'assistant', got {role!r}")
            if i and role == self.history[i - 1][0]:
                raise ModelError("history roles must alternate")

    def to_doc(self) -> dict[str, Any]:
        return {"query": self.query, "history": [list(turn) for turn in self.history]}

    @classmethod
    def from_doc(cls, doc: dict[str, Any]) -> "QueryContext":
        return cls(query=doc["query"], history=tuple((r, t) for r, t in doc.get("history", ())))


@dataclass(frozen=True, slots=True)
class GenParams:
    """Sampling parameters forwarded to the backend on every call."""

    temperature: float = 0.7
    max_tokens: int = 2048

    def __post_init__(self) -> None:
        if self.temperature < 0.0:
            raise ModelError(f"temperature must be >= 0: {self.temperature}")
        if self.max_tokens < 1:
            raise ModelError(f"max_tokens must be positive: {self.max_tokens}")


@dataclass(frozen=True, slots=True)
class AgentSpec:
    """One seat in the roster: a stable id bound to a backend and model.

    Ids are caller-supplied tokens, not model names, so one model may hold
    several seats under distinct ids.
    """

    agent_id: str
    role: Role
    backend: str
    model: str
    params: GenParams = GenParams()

    def __post_init__(self) -> None:
        if not self.agent_id or any(c.isspace() for c in self.agent_id):
            raise ModelError(f"agent_id must be non-empty and contain no whitespace: {self.agent_id!r}")
        if not self.backend:
            raise ModelError(f"agent {self.agent_id!r} has an empty backend name")
        if not self.model:
            raise ModelError(f"agent {self.agent_id!r} has an empty model name")


def validate_roster(roster: Sequence[AgentSpec]) -> tuple[AgentSpec, ...]:
    """Check roster shape and return it as a tuple in the given order.

    Requires at least MIN_COLLABORATORS collaborative agents, exactly one
    summary agent, exactly one residual agent, and unique ids.  Judge agents
    may appear; the pipeline ignores them.  Roster order is load-bearing: it
    fixes agent numbering inside prompts and the order of ledger entries.
    """
    seen: set[str] = set()
    for spec in roster:
        if spec.agent_id in seen:
            raise RosterError(f"duplicate agent_id: {spec.agent_id!r}")
        seen.add(spec.agent_id)
    n_collab = sum(1 for s in roster if s.role is Role.COLLABORATIVE)
    n_summary = sum(1 for s in roster if s.role is Role.SUMMARY)
    n_residual = sum(1 for s in roster if s.role is Role.RESIDUAL)
    if n_collab < MIN_COLLABORATORS:
        raise RosterError(f"need at least {MIN_COLLABORATORS} collaborative agents, got {n_collab}")
    if n_summary != 1:
        raise RosterError(f"need exactly one summary agent, got {n_summary}")
    if n_residual != 1:
        raise RosterError(f"need exactly one residual agent, got {n_residual}")
    return tuple(roster)


def collaborators(roster: Sequence[AgentSpec]) -> tuple[AgentSpec, ...]:
    return tuple(s for s in roster if s.role is Role.COLLABORATIVE)


def summary_agent(roster: Sequence[AgentSpec]) -> AgentSpec:
    return next(s for s in roster if s.role is Role.SUMMARY)


def residual_agent(roster: Sequence[AgentSpec]) -> AgentSpec:
    return next(s for s in roster if s.role is Role.RESIDUAL)


@dataclass(frozen=True, slots=True)
class UsageRecord:
    """Token accounting for one logical backend call.

    prompt_tokens and completion_tokens always come from the engine-side
    tokenizer so that accounting works on backends that report no usage;
    reported_* carry whatever the backend returned, if anything.
    cached_prompt_tokens counts the prompt prefix already seen by the same
    (backend, agent) scope earlier in the run.
    """

    phase: Phase
    layer: int
    agent_id: str
    prompt_tokens: int
    completion_tokens: int
    cached_prompt_tokens: int = 0
    reported_prompt_tokens: int | None = None
    reported_completion_tokens: int | None = None

    def __post_init__(self) -> None:
        if self.prompt_tokens < 0 or self.completion_tokens < 0 or self.cached_prompt_tokens < 0:
            raise ModelError("token counts must be non-negative")
        if self.cached_prompt_tokens > self.prompt_tokens:
            raise ModelError("cached_prompt_tokens cannot exceed prompt_tokens")

    def to_doc(self) -> dict[str, Any]:
        return {
            "phase": self.phase.value,
            "layer": self.layer,
            "agent_id": self.agent_id,
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "cached_prompt_tokens": self.cached_prompt_tokens,
            "reported_prompt_tokens": self.reported_prompt_tokens,
            "reported_completion_tokens": self.reported_completion_tokens,
        }

    @classmethod
    def from_doc(cls, doc: dict[str, Any]) -> "UsageRecord":
        return cls(
            phase=Phase(doc["phase"]),
            layer=doc["layer"],
            agent_id=doc["agent_id"],
            prompt_tokens=doc["prompt_tokens"],
            completion_tokens=doc["completion_tokens"],
            cached_prompt_tokens=doc.get("cached_prompt_tokens", 0),
            reported_prompt_tokens=doc.get("reported_prompt_tokens"),
            reported_completion_tokens=doc.get("reported_completion_tokens"),
        )


@dataclass(frozen=True, slots=True)
class AgentResponse:
    """One collaborator's text for one stage of a layer."""

    agent_id: str
    layer: int
    stage: Stage
    text: str
    usage: UsageRecord

    def __post_init__(self) -> None:
        if not self.text:
            raise ModelError(f"agent {self.agent_id} produced an empty {self.stage.value} response")


@dataclass(frozen=True, slots=True)
class AttentionInstruction:
    """One cell of a layer's instruction matrix: advisor -> recipient advice.

    The diagonal (advisor == recipient) holds self-review output.  Every layer
    produces a complete N x N matrix regardless of attention mode.
    """

    advisor_id: str
    recipient_id: str
    layer: int
    kind: AttentionKind
    text: str

    def __post_init__(self) -> None:
        if (self.kind is AttentionKind.SELF) != (self.advisor_id == self.recipient_id):
            raise ModelError("kind=self exactly when advisor and recipient coincide")

    def to_doc(self) -> dict[str, Any]:
        return {
            "advisor_id": self.advisor_id,
            "recipient_id": self.recipient_id,
            "layer": self.layer,
            "kind": self.kind.value,
            "text": self.text,
        }

    @classmethod
    def from_doc(cls, doc: dict[str, Any]) -> "AttentionInstruction":
        return cls(
            advisor_id=doc["advisor_id"],
            recipient_id=doc["recipient_id"],
            layer=doc["layer"],
            kind=AttentionKind(doc["kind"]),
            text=doc["text"],
        )


@dataclass(frozen=True, slots=True)
class LayerOutput:
    """What a layer hands upward: its summary (layer 1) or synthesis (else)."""

    layer: int
    text: str
    kind: LayerKind

    def to_doc(self) -> dict[str, Any]:
        return {"layer": self.layer, "text": self.text, "kind": self.kind.value}

    @classmethod
    def from_doc(cls, doc: dict[str, Any]) -> "LayerOutput":
        return cls(layer=doc["layer"], text=doc["text"], kind=LayerKind(doc["kind"]))


class HistoryStackError(ModelError):
    """Stack discipline was violated."""


class HistoryStack:
    """Round history feeding the residual agent.

    Before layer l synthesizes, the stack holds [y_1, ..., y_{l-1}, ~y_l]
    where ~y_l is the fresh layer summary, so its length is exactly l.  After
    synthesis the top entry is replaced with the synthesized y_l.
    """

    __slots__ = ("_entries",)

    def __init__(self, entries: Iterable[LayerOutput] = ()) -> None:
        self._entries: list[LayerOutput] = []
        for entry in entries:
            self.push(entry)

    def push(self, entry: LayerOutput) -> None:
        if self._entries and entry.layer <= self._entries[-1].layer:
            raise HistoryStackError(
                f"layer {entry.layer} pushed after layer {self._entries[-1].layer}; layers must increase"
            )
        self._entries.append(entry)

    def replace_top(self, entry: LayerOutput) -> None:
        if not self._entries:
            raise HistoryStackError("cannot replace the top of an empty stack")
        if entry.layer != self._entries[-1].layer:
            raise HistoryStackError(
                f"replacement layer {entry.layer} does not match top layer {self._entries[-1].layer}"
            )
        self._entries[-1] = entry

    @property
    def entries(self) -> tuple[LayerOutput, ...]:
        return tuple(self._entries)

    @property
    def texts(self) -> tuple[str, ...]:
        return tuple(e.text for e in self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, HistoryStack):
            return NotImplemented
        return self._entries == other._entries

    def __repr__(self) -> str:
        return f"HistoryStack({self._entries!r})"


@dataclass(frozen=True, slots=True)
class TerminationSignal:
    """The residual agent's per-layer stop decision."""

    stopped: bool
    layer: int

    def __post_init__(self) -> None:
        if self.stopped and self.layer < 2:
            raise ModelError("stopping is only possible at layers >= 2")

    def to_doc(self) -> dict[str, Any]:
        return {"stopped": self.stopped, "layer": self.layer}

    @classmethod
    def from_doc(cls, doc: dict[str, Any]) -> "TerminationSignal":
        return cls(stopped=doc["stopped"], layer=doc["layer"])


@dataclass(frozen=True, slots=True)
class CallRecord:
    """One logical backend call in the run ledger, in commit order.

    advisor/recipient are set only for attention calls; repeat distinguishes
    the re-ask retry of a malformed single-pass completion (repeat=1) from
    the original attempt (repeat=0).
    """

    index: int
    usage: UsageRecord
    system: str | None
    user: str
    response: str
    advisor_id: str | None = None
    recipient_id: str | None = None
    repeat: int = 0

    @property
    def layer(self) -> int:
        return self.usage.layer

    @property
    def phase(self) -> Phase:
        return self.usage.phase

    @property
    def agent_id(self) -> str:
        return self.usage.agent_id

    def to_doc(self) -> dict[str, Any]:
        return {
            "index": self.index,
            "usage": self.usage.to_doc(),
            "system": self.system,
            "user": self.user,
            "response": self.response,
            "advisor_id": self.advisor_id,
            "recipient_id": self.recipient_id,
            "repeat": self.repeat,
        }

    @classmethod
    def from_doc(cls, doc: dict[str, Any]) -> "CallRecord":
        return cls(
            index=doc["index"],
            usage=UsageRecord.from_doc(doc["usage"]),
            system=doc["system"],
            user=doc["user"],
            response=doc["response"],
            advisor_id=doc.get("advisor_id"),
            recipient_id=doc.get("recipient_id"),
            repeat=doc.get("repeat", 0),
        )


@dataclass(frozen=True, slots=True)
class ResidualRecord:
    """Residual synthesis outcome for one layer."""

    raw_completion: str
    stopped: bool
    output: str

    def to_doc(self) -> dict[str, Any]:
        return {"raw_completion": self.raw_completion, "stopped": self.stopped, "output": self.output}

    @classmethod
    def from_doc(cls, doc: dict[str, Any]) -> "ResidualRecord":
        return cls(raw_completion=doc["raw_completion"], stopped=doc["stopped"], output=doc["output"])


@dataclass(frozen=True, slots=True)
class LayerTranscript:
    """Everything one executed layer produced, in roster order."""

    layer: int
    initial: tuple[tuple[str, str], ...]
    instructions: tuple[AttentionInstruction, ...]
    refined: tuple[tuple[str, str], ...]
    summary: str
    output: LayerOutput
    residual: ResidualRecord | None = None

    def to_doc(self) -> dict[str, Any]:
        return {
            "layer": self.layer,
            "initial": [list(p) for p in self.initial],
            "instructions": [i.to_doc() for i in self.instructions],
            "refined": [list(p) for p in self.refined],
            "summary": self.summary,
            "output": self.output.to_doc(),
            "residual": self.residual.to_doc() if self.residual is not None else None,
        }

    @classmethod
    def from_doc(cls, doc: dict[str, Any]) -> "LayerTranscript":
        residual = doc.get("residual")
        return cls(
            layer=doc["layer"],
            initial=tuple((a, t) for a, t in doc["initial"]),
            instructions=tuple(AttentionInstruction.from_doc(d) for d in doc["instructions"]),
            refined=tuple((a, t) for a, t in doc["refined"]),
            summary=doc["summary"],
            output=LayerOutput.from_doc(doc["output"]),
            residual=ResidualRecord.from_doc(residual) if residual is not None else None,
        )


@dataclass(frozen=True, slots=True)
class PipelineConfig:
    """Static plan for a run: roster, depth, mode, stopping, accounting.

    The roster binds agents to backend *names*; the mapping from names to
    live backends is supplied separately at run time, so a transcript recorded
    against HTTP backends replays byte-identically against replay backends
    bound to the same names.  seed is advisory run metadata: builders use it
    to seed mock backends that do not pin their own.
    """

    roster: tuple[AgentSpec, ...]
    layers: int
    mode: AttentionMode = AttentionMode.PAIRWISE
    early_stopping: bool = False
    caching_enabled: bool = True
    seed: int = 0
    tokenizer: str = "approx_chars"
    cache_hit_cost_factor: float = 0.0
    gen_defaults: GenParams = GenParams()
    max_in_flight: int = 8
    deadline: float | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "roster", validate_roster(self.roster))
        if self.layers < 1:
            raise ModelError(f"layers must be >= 1, got {self.layers}")
        if not 0.0 <= self.cache_hit_cost_factor <= 1.0:
            raise ModelError(f"cache_hit_cost_factor out of range: {self.cache_hit_cost_factor}")
        if self.max_in_flight < 1:
            raise ModelError(f"max_in_flight must be >= 1, got {self.max_in_flight}")
        if self.deadline is not None and self.deadline <= 0:
            raise ModelError(f"deadline must be positive when set: {self.deadline}")

    @property
    def n_collaborators(self) -> int:
        return len(collaborators(self.roster))

    def to_doc(self) -> dict[str, Any]:
        return {
            "roster": [
                {
                    "agent_id": s.agent_id,
                    "role": s.role.value,
                    "backend": s.backend,
                    "model": s.model,
                    "temperature": s.params.temperature,
                    "max_tokens": s.params.max_tokens,
                }
                for s in self.roster
            ],
            "layers": self.layers,
            "mode": self.mode.value,
            "early_stopping": self.early_stopping,
            "caching_enabled": self.caching_enabled,
            "seed": self.seed,
            "tokenizer": self.tokenizer,
            "cache_hit_cost_factor": self.cache_hit_cost_factor,
            "gen_defaults": {"temperature": self.gen_defaults.temperature, "max_tokens": self.gen_defaults.max_tokens},
            "max_in_flight": self.max_in_flight,
            "deadline": self.deadline,
        }

    @classmethod
    def from_doc(cls, doc: dict[str, Any]) -> "PipelineConfig":
        roster = tuple(
            AgentSpec(
                agent_id=d["agent_id"],
                role=Role(d["role"]),
                backend=d["backend"],
                model=d["model"],
                params=GenParams(temperature=d["temperature"], max_tokens=d["max_tokens"]),
            )
            for d in doc["roster"]
        )
        defaults = doc.get("gen_defaults", {})
        return cls(
            roster=roster,
            layers=doc["layers"],
            mode=AttentionMode(doc["mode"]),
            early_stopping=doc["early_stopping"],
            caching_enabled=doc.get("caching_enabled", True),
            seed=doc.get("seed", 0),
            tokenizer=doc["tokenizer"],
            cache_hit_cost_factor=doc["cache_hit_cost_factor"],
            gen_defaults=GenParams(
                temperature=defaults.get("temperature", 0.7),
                max_tokens=defaults.get("max_tokens", 2048),
            ),
            max_in_flight=doc.get("max_in_flight", 8),
            deadline=doc.get("deadline"),
        )


def canonical_json(doc: Any) -> str:
    """Serialize to the one JSON form the whole project uses for artifacts."""
    return json.dumps(doc, ensure_ascii=False, sort_keys=True, indent=2) + "\n"


@dataclass(frozen=True, slots=True)
class RunTranscript:
    """Durable record of one pipeline run.

    Layers appear in execution order; layers skipped by early stopping are
    listed in skipped_layers and have no LayerTranscript and no calls.  A
    failed run keeps everything committed before the failure and carries the
    error message.
    """

    config: PipelineConfig
    query: QueryContext
    layers: tuple[LayerTranscript, ...]
    calls: tuple[CallRecord, ...]
    final_output: str
    termination: TerminationSignal | None = None
    skipped_layers: tuple[int, ...] = ()
    status: str = "ok"
    error: str | None = None
    schema_version: int = SCHEMA_VERSION

    @property
    def ledger(self) -> tuple[UsageRecord, ...]:
        return tuple(c.usage for c in self.calls)

    def to_doc(self) -> dict[str, Any]:
        return {
            "schema_version": self.schema_version,
            "config": self.config.to_doc(),
            "query": self.query.to_doc(),
            "layers": [ly.to_doc() for ly in self.layers],
            "calls": [c.to_doc() for c in self.calls],
            "final_output": self.final_output,
            "termination": self.termination.to_doc() if self.termination is not None else None,
            "skipped_layers": list(self.skipped_layers),
            "status": self.status,
            "error": self.error,
        }

    def to_json(self) -> str:
        return canonical_json(self.to_doc())

    @classmethod
    def from_doc(cls, doc: dict[str, Any]) -> "RunTranscript":
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise TranscriptError(f"unsupported schema_version: {doc.get('schema_version')!r}")
        termination = doc.get("termination")
        return cls(
            config=PipelineConfig.from_doc(doc["config"]),
            query=QueryContext.from_doc(doc["query"]),
            layers=tuple(LayerTranscript.from_doc(d) for d in doc["layers"]),
            calls=tuple(CallRecord.from_doc(d) for d in doc["calls"]),
            final_output=doc["final_output"],
            termination=TerminationSignal.from_doc(termination) if termination is not None else None,
            skipped_layers=tuple(doc.get("skipped_layers", ())),
            status=doc.get("status", "ok"),
            error=doc.get("error"),
        )

    @classmethod
    def from_json(cls, text: str) -> "RunTranscript":
        return cls.from_doc(json.loads(text))
