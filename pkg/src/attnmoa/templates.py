"""Prompt rendering and structured-output parsing.

The prompt wording lives in plain-text fixtures under templates/ and is
checked against golden files byte for byte, so nothing here may normalize,
strip, or re-wrap text.  Each fixture shows one example block followed by a
continuation marker ("Response from ..."); rendering replaces that whole
region with one block per actual value.

Assembly scans only fixture text, never substituted values: regions are
swapped for NUL-delimited tokens and slots are split out while the template
is still pristine, then values drop into place in a single pass.  A
completion that happens to contain "{user_query}" or a block header line
therefore passes through untouched.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Mapping, Sequence

from .model import HistoryStack, ModelError, QueryContext


class TemplateError(ModelError):
    """A fixture is missing, malformed, or was rendered with bad inputs."""


class MalformedSuggestionError(TemplateError):
    """A single-pass completion contained no parsable JSON object."""


@dataclass(frozen=True, slots=True)
class RenderedPrompt:
    """One prompt ready for a backend call.

    shared_prefix_len is informational: the accounting layer fills it with the
    token length of the prefix this prompt shares with earlier prompts in the
    same cache scope.
    """

    user: str
    system: str | None = None
    shared_prefix_len: int = 0

    def __post_init__(self) -> None:
        if not self.user:
            raise TemplateError("rendered user prompt must be non-empty")


@dataclass(frozen=True, slots=True)
class SuggestionMap:
    """Peer-indexed suggestions parsed from a single-pass completion.

    Indices are 1-based positions in the peer enumeration of the prompt the
    completion answered, not roster indices.
    """

    by_index: tuple[tuple[int, str], ...]

    def get(self, index: int) -> str | None:
        for k, text in self.by_index:
            if k == index:
                return text
        return None

    def __len__(self) -> int:
        return len(self.by_index)


@lru_cache(maxsize=None)
def _fixture(name: str) -> str:
    path = resources.files(__package__) / "templates" / f"{name}.txt"
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise TemplateError(f"missing template fixture: {name}") from None
    if "\x00" in text:
        raise TemplateError(f"fixture {name} contains a NUL byte")
    return text.rstrip("\n")


_SLOT_RE = re.compile(r"\{([a-z][a-z0-9_]*)\}")
_REGION_TOKEN_RE = re.compile("\x00([0-9]+)\x00")


@dataclass(frozen=True, slots=True)
class _Region:
    """A fixture span to replace wholesale: the example block plus its
    continuation marker, located between two anchors (end=None means end of
    fixture)."""

    start_anchor: str
    end_anchor: str | None


def _cut_region(template: str, region: _Region, token: str) -> str:
    start = template.find(region.start_anchor)
    if start < 0:
        raise TemplateError(f"fixture anchor not found: {region.start_anchor!r}")
    start += len(region.start_anchor)
    if region.end_anchor is None:
        return template[:start] + token
    end = template.find(region.end_anchor, start)
    if end < 0:
        raise TemplateError(f"fixture anchor not found: {region.end_anchor!r}")
    return template[:start] + token + template[end:]


def _render(
    fixture_name: str,
    values: Mapping[str, str],
    regions: Sequence[tuple[_Region, str]] = (),
) -> str:
    """Assemble a fixture with regions replaced and slots filled.

    Region block text and slot values are inserted exactly once and never
    re-scanned, so values containing slot markers or anchors are inert.
    """
    template = _fixture(fixture_name)
    blocks: list[str] = []
    for region, block in regions:
        template = _cut_region(template, region, f"\x00{len(blocks)}\x00")
        blocks.append(block)
    out: list[str] = []
    for i, part in enumerate(_SLOT_RE.split(template)):
        if i % 2:
            if part not in values:
                raise TemplateError(f"no value for template slot {{{part}}}")
            out.append(values[part])
            continue
        for j, piece in enumerate(_REGION_TOKEN_RE.split(part)):
            out.append(blocks[int(piece)] if j % 2 else piece)
    return "".join(out)


def render_history(history: Sequence[tuple[str, str]]) -> str:
    return "\n".join(f"{role}: {text}" for role, text in history)


def _context_user(ctx: QueryContext) -> str:
    """User prompt for templates whose body lives in the system prompt."""
    if not ctx.history:
        return ctx.query
    return render_history(ctx.history) + "\n" + ctx.query


def _numbered(pattern: str, texts: Sequence[str], sep: str) -> str:
    return sep.join(pattern.format(k=i + 1, text=text) for i, text in enumerate(texts))


_RESPONSES_REGION = _Region("Responses from models:\n", None)
_ANSWERS_REGION = _Region("The answer of other large language models are:\n", "\n\nThe answer of yours is:")
_SCHEMA_REGION = _Region("The output should be a JSON object as:\n{\n", "\n}")
_SUGGESTIONS_REGION = _Region(
    "Belows are the suggestions from other large language models to your previous answer:\n",
    "\n\nPlease integrate those reasonable suggestions",
)
_ROUNDS_REGION = _Region("Responses of historical round:\n", None)


def render_sampling(ctx: QueryContext, prev_layer_output: str | None = None) -> RenderedPrompt:
    """First-stage answer prompt.

    At layer 1 the agent sees only the conversation itself.  At deeper layers
    the synthesis stanza carries the previous layer's output as the single
    prior response.
    """
    if prev_layer_output is None:
        return RenderedPrompt(user=_context_user(ctx))
    blocks = _numbered("Response from model {k}:\n{text}", [prev_layer_output], "\n")
    system = _render("sampling_system", {}, [(_RESPONSES_REGION, blocks)])
    return RenderedPrompt(user=_context_user(ctx), system=system)


def render_cross_pairwise(ctx: QueryContext, own_answer: str, other_answer: str) -> RenderedPrompt:
    user = _render(
        "cross_pairwise",
        {
            "conv_history": render_history(ctx.history),
            "user_query": ctx.query,
            "model_answer_other": other_answer,
            "model_answer_own": own_answer,
        },
    )
    return RenderedPrompt(user=user)


def render_cross_singlepass(ctx: QueryContext, own_answer: str, peer_answers: Sequence[str]) -> RenderedPrompt:
    """One prompt critiquing every peer at once.

    Peers are numbered 1..len(peer_answers) in the order given, which must be
    roster order with the advisor itself excluded; the completion's JSON keys
    refer to these positions.
    """
    if not peer_answers:
        raise TemplateError("single-pass cross-attention needs at least one peer answer")
    answers = _numbered("Answer from model {k}:\n{text}", peer_answers, "\n")
    schema = ",\n".join(
        f'"suggestion_for_model_{k}": "your suggestions for the answer of model {k}"'
        for k in range(1, len(peer_answers) + 1)
    )
    user = _render(
        "cross_singlepass",
        {
            "conv_history": render_history(ctx.history),
            "user_query": ctx.query,
            "model_answer_own": own_answer,
        },
        [(_ANSWERS_REGION, answers), (_SCHEMA_REGION, schema)],
    )
    return RenderedPrompt(user=user)


def render_self_attention(ctx: QueryContext, own_answer: str) -> RenderedPrompt:
    user = _render(
        "self_attention",
        {
            "conv_history": render_history(ctx.history),
            "user_query": ctx.query,
            "model_answer_own": own_answer,
        },
    )
    return RenderedPrompt(user=user)


def render_aggregation(ctx: QueryContext, own_answer: str, suggestions: Sequence[tuple[int, str]]) -> RenderedPrompt:
    """Refinement prompt folding the advice column for one recipient.

    suggestions pairs a 1-based roster index with that advisor's text; the
    advisor set includes the recipient itself (self-review).  Blocks are
    emitted in index order no matter how the pairs arrive.
    """
    if not suggestions:
        raise TemplateError("aggregation needs at least one suggestion")
    ordered = sorted(suggestions, key=lambda pair: pair[0])
    blocks = "\n\n".join(f"Suggestions from model {k}:\n{text}" for k, text in ordered)
    system = _render(
        "aggregation_system",
        {"model_query": own_answer},
        [(_SUGGESTIONS_REGION, blocks)],
    )
    return RenderedPrompt(user=_context_user(ctx), system=system)


def render_summarization(ctx: QueryContext, refined_responses: Sequence[str]) -> RenderedPrompt:
    """Fold all refined answers of a layer into one synthesis prompt."""
    if len(refined_responses) < 2:
        raise TemplateError("summarization needs at least two refined responses")
    blocks = _numbered("Response from model {k}:\n{text}", refined_responses, "\n")
    system = _render("sampling_system", {}, [(_RESPONSES_REGION, blocks)])
    return RenderedPrompt(user=_context_user(ctx), system=system)


def render_residual(ctx: QueryContext, stack: HistoryStack, es_enabled: bool = False) -> RenderedPrompt:
    """Synthesis prompt over the round history, oldest round first.

    Each layer's prompt extends the previous layer's by one round block, so a
    prefix cache sees all earlier rounds as a hit.  With early stopping on,
    the stop clause is appended after the rounds.
    """
    if len(stack) < 2:
        raise TemplateError("residual synthesis needs a stack of at least two rounds")
    blocks = _numbered("Response of historical round {k}:\n{text}", stack.texts, "\n")
    system = _render("residual_system", {}, [(_ROUNDS_REGION, blocks)])
    if es_enabled:
        system = system + "\n\n" + _fixture("residual_es_clause")
    return RenderedPrompt(user=_context_user(ctx), system=system)


def render_judge(query: str, response_a: str, response_b: str) -> RenderedPrompt:
    user = _render(
        "judge_pairwise",
        {"user_query": query, "response_a": response_a, "response_b": response_b},
    )
    return RenderedPrompt(user=user)


_SUGGESTION_KEY_RE = re.compile(r"^suggestion_for_model_([1-9][0-9]*)$")


def _first_json_object(text: str) -> dict | None:
    decoder = json.JSONDecoder()
    pos = text.find("{")
    while pos >= 0:
        try:
            value, _ = decoder.raw_decode(text, pos)
        except json.JSONDecodeError:
            pos = text.find("{", pos + 1)
            continue
        if isinstance(value, dict):
            return value
        pos = text.find("{", pos + 1)
    return None


def parse_singlepass(text: str, n_peers: int | None = None) -> SuggestionMap:
    """Extract the suggestion map from a single-pass completion.

    Tolerates prose and code fences around the JSON object.  Keys that do not
    look like suggestion_for_model_k, and indices beyond n_peers when given,
    are dropped.  Raises MalformedSuggestionError when no JSON object can be
    decoded at all.
    """
    obj = _first_json_object(text)
    if obj is None:
        raise MalformedSuggestionError("no JSON object found in completion")
    pairs: list[tuple[int, str]] = []
    for key, value in obj.items():
        match = _SUGGESTION_KEY_RE.match(key)
        if match is None:
            continue
        index = int(match.group(1))
        if n_peers is not None and index > n_peers:
            continue
        pairs.append((index, value if isinstance(value, str) else json.dumps(value, ensure_ascii=False)))
    return SuggestionMap(by_index=tuple(sorted(pairs)))


STOP_SENTINEL = "Attention-MoA should be stopped"
_NORMALIZED_SENTINEL = " ".join(STOP_SENTINEL.lower().split())


def detect_stop_sentinel(text: str) -> bool:
    """True when a completion asks to stop the pipeline.

    Matching is a normalized substring test (lowercase, asterisks removed,
    whitespace runs collapsed) because models tend to decorate the phrase
    they were told to output verbatim.
    """
    normalized = " ".join(text.lower().replace("*", " ").split())
    return _NORMALIZED_SENTINEL in normalized
