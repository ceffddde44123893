"""Token counting, prefix-cache modeling, and cost reporting.

Backends rarely agree on tokenization, and some report no usage at all, so
every call is measured locally with one of the rules below.  The cache model
estimates how much of each prompt a provider-side prefix cache would have
served: within one run, per (backend, agent) scope, the cached portion of a
prompt is its longest common prefix with any prompt issued earlier in the
same scope.
"""

from __future__ import annotations

import bisect
import csv
import io
from dataclasses import dataclass
from typing import Any, Callable, Iterable

from .model import ModelError, Phase, RunTranscript, UsageRecord, canonical_json


class TokenizerError(ModelError):
    """Unknown tokenizer name."""


@dataclass(frozen=True, slots=True)
class TokenizerSpec:
    """A named deterministic token counting rule."""

    name: str
    count: Callable[[str], int]


def _approx_chars(text: str) -> int:
    # ceil(chars / 4) without floats
    return (len(text) + 3) // 4


def _whitespace(text: str) -> int:
    return len(text.split())


_TOKENIZERS: dict[str, TokenizerSpec] = {
    "approx_chars": TokenizerSpec("approx_chars", _approx_chars),
    "whitespace": TokenizerSpec("whitespace", _whitespace),
}


def register_tokenizer(name: str, count: Callable[[str], int]) -> TokenizerSpec:
    """Install an external counting hook under the given name."""
    spec = TokenizerSpec(name, count)
    _TOKENIZERS[name] = spec
    return spec


def resolve_tokenizer(name: str) -> TokenizerSpec:
    try:
        return _TOKENIZERS[name]
    except KeyError:
        raise TokenizerError(f"unknown tokenizer: {name!r}") from None


def count_tokens(text: str, tokenizer: str | TokenizerSpec = "approx_chars") -> int:
    spec = tokenizer if isinstance(tokenizer, TokenizerSpec) else resolve_tokenizer(tokenizer)
    n = spec.count(text)
    if n < 0:
        raise TokenizerError(f"tokenizer {spec.name!r} returned a negative count")
    return n


def prompt_text(system: str | None, user: str) -> str:
    """Canonical single-string form of a prompt, used for counting and caching."""
    if system:
        return system + "\n\n" + user
    return user


def _common_prefix_len(a: str, b: str) -> int:
    limit = min(len(a), len(b))
    i = 0
    while i < limit and a[i] == b[i]:
        i += 1
    return i


class _ScopeStore:
    """Sorted prompt store for one (backend, agent) scope.

    In a lexicographically sorted list, the stored string sharing the longest
    common prefix with a probe is always adjacent to the probe's insertion
    point, so a lookup only has to inspect two neighbours.
    """

    __slots__ = ("_sorted",)

    def __init__(self) -> None:
        self._sorted: list[str] = []

    def longest_prefix(self, prompt: str) -> int:
        i = bisect.bisect_left(self._sorted, prompt)
        best = 0
        if i < len(self._sorted):
            best = _common_prefix_len(prompt, self._sorted[i])
        if i > 0:
            best = max(best, _common_prefix_len(prompt, self._sorted[i - 1]))
        return best

    def add(self, prompt: str) -> None:
        i = bisect.bisect_left(self._sorted, prompt)
        if i < len(self._sorted) and self._sorted[i] == prompt:
            return
        self._sorted.insert(i, prompt)


class CacheModel:
    """Run-scoped prefix-cache estimator.

    Scopes are keyed by (backend name, agent id) and reset when the run ends;
    a fresh CacheModel is built per run.  With enabled=False every lookup
    reports zero cached tokens and nothing is stored.
    """

    def __init__(
        self,
        tokenizer: str | TokenizerSpec = "approx_chars",
        hit_cost_factor: float = 0.0,
        enabled: bool = True,
    ) -> None:
        if not 0.0 <= hit_cost_factor <= 1.0:
            raise ModelError(f"hit_cost_factor out of range: {hit_cost_factor}")
        self.tokenizer = tokenizer if isinstance(tokenizer, TokenizerSpec) else resolve_tokenizer(tokenizer)
        self.hit_cost_factor = hit_cost_factor
        self.enabled = enabled
        self._scopes: dict[tuple[str, str], _ScopeStore] = {}

    def observe(self, backend: str, agent_id: str, prompt: str) -> int:
        """Record a prompt and return its cached token count.

        Must be called in the engine's canonical issue order; the caller is
        responsible for not interleaving observations racily.
        """
        if not self.enabled:
            return 0
        scope = self._scopes.setdefault((backend, agent_id), _ScopeStore())
        cached = count_tokens(prompt[: scope.longest_prefix(prompt)], self.tokenizer)
        scope.add(prompt)
        return cached

    def measure(
        self,
        phase: Phase,
        layer: int,
        backend: str,
        agent_id: str,
        system: str | None,
        user: str,
        completion: str,
    ) -> UsageRecord:
        """Count one call's tokens and record its prompt in the cache scope."""
        joined = prompt_text(system, user)
        return UsageRecord(
            phase=phase,
            layer=layer,
            agent_id=agent_id,
            prompt_tokens=count_tokens(joined, self.tokenizer),
            completion_tokens=count_tokens(completion, self.tokenizer),
            cached_prompt_tokens=self.observe(backend, agent_id, joined),
        )


def apply_cache(usage: UsageRecord, cached_prompt_tokens: int) -> UsageRecord:
    """Return a copy of usage with the cached prompt portion filled in."""
    return UsageRecord(
        phase=usage.phase,
        layer=usage.layer,
        agent_id=usage.agent_id,
        prompt_tokens=usage.prompt_tokens,
        completion_tokens=usage.completion_tokens,
        cached_prompt_tokens=cached_prompt_tokens,
        reported_prompt_tokens=usage.reported_prompt_tokens,
        reported_completion_tokens=usage.reported_completion_tokens,
    )


def effective_prompt_tokens(usage: UsageRecord, hit_cost_factor: float) -> float:
    return (usage.prompt_tokens - usage.cached_prompt_tokens) + hit_cost_factor * usage.cached_prompt_tokens


def effective_tokens(usage: UsageRecord, hit_cost_factor: float) -> float:
    return effective_prompt_tokens(usage, hit_cost_factor) + usage.completion_tokens


@dataclass(frozen=True, slots=True)
class CostRow:
    """Aggregated cost of one (layer, phase, agent) cell of the ledger."""

    layer: int
    phase: Phase
    agent_id: str
    calls: int
    prompt_tokens: int
    cached_prompt_tokens: int
    completion_tokens: int
    effective_prompt_tokens: float


def _fmt(x: float) -> str:
    return f"{x:g}"


@dataclass(frozen=True, slots=True)
class CostReport:
    """Ledger rollup for one run or a set of runs."""

    rows: tuple[CostRow, ...]
    stop_histogram: tuple[tuple[int, int], ...] = ()
    runs: int = 1

    @property
    def total_calls(self) -> int:
        return sum(r.calls for r in self.rows)

    @property
    def total_prompt_tokens(self) -> int:
        return sum(r.prompt_tokens for r in self.rows)

    @property
    def total_cached_prompt_tokens(self) -> int:
        return sum(r.cached_prompt_tokens for r in self.rows)

    @property
    def total_completion_tokens(self) -> int:
        return sum(r.completion_tokens for r in self.rows)

    @property
    def total_effective_prompt_tokens(self) -> float:
        return sum(r.effective_prompt_tokens for r in self.rows)

    @property
    def total_raw_tokens(self) -> int:
        return self.total_prompt_tokens + self.total_completion_tokens

    @property
    def total_effective_tokens(self) -> float:
        return self.total_effective_prompt_tokens + self.total_completion_tokens

    def by_phase(self) -> dict[Phase, tuple[int, int, float]]:
        """Phase -> (raw prompt, cached, effective prompt)."""
        out: dict[Phase, tuple[int, int, float]] = {}
        for r in self.rows:
            raw, cached, eff = out.get(r.phase, (0, 0, 0.0))
            out[r.phase] = (raw + r.prompt_tokens, cached + r.cached_prompt_tokens, eff + r.effective_prompt_tokens)
        return out

    def by_layer(self) -> dict[int, tuple[int, int, float]]:
        """Layer -> (raw prompt, cached, effective prompt)."""
        out: dict[int, tuple[int, int, float]] = {}
        for r in self.rows:
            raw, cached, eff = out.get(r.layer, (0, 0, 0.0))
            out[r.layer] = (raw + r.prompt_tokens, cached + r.cached_prompt_tokens, eff + r.effective_prompt_tokens)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer", "phase", "agent", "raw", "cached", "effective"])
        for r in self.rows:
            raw = r.prompt_tokens + r.completion_tokens
            effective = r.effective_prompt_tokens + r.completion_tokens
            writer.writerow([r.layer, r.phase.value, r.agent_id, raw, r.cached_prompt_tokens, _fmt(effective)])
        return buf.getvalue()

    def to_doc(self) -> dict[str, Any]:
        return {
            "runs": self.runs,
            "rows": [
                {
                    "layer": r.layer,
                    "phase": r.phase.value,
                    "agent": r.agent_id,
                    "calls": r.calls,
                    "prompt_tokens": r.prompt_tokens,
                    "cached_prompt_tokens": r.cached_prompt_tokens,
                    "completion_tokens": r.completion_tokens,
                    "effective_prompt_tokens": r.effective_prompt_tokens,
                }
                for r in self.rows
            ],
            "stop_histogram": {str(layer): n for layer, n in self.stop_histogram},
            "totals": {
                "calls": self.total_calls,
                "prompt_tokens": self.total_prompt_tokens,
                "cached_prompt_tokens": self.total_cached_prompt_tokens,
                "completion_tokens": self.total_completion_tokens,
                "raw_tokens": self.total_raw_tokens,
                "effective_tokens": self.total_effective_tokens,
            },
        }

    def to_json(self) -> str:
        return canonical_json(self.to_doc())

    def to_text(self) -> str:
        lines = [
            f"runs: {self.runs}",
            f"calls: {self.total_calls}",
            f"prompt tokens: {self.total_prompt_tokens} raw, {self.total_cached_prompt_tokens} cached",
            f"completion tokens: {self.total_completion_tokens}",
            f"total tokens: {self.total_raw_tokens} raw, {_fmt(self.total_effective_tokens)} effective",
        ]
        if self.stop_histogram:
            bins = ", ".join(f"layer {layer}: {n}" for layer, n in self.stop_histogram)
            lines.append(f"stops: {bins}")
        return "\n".join(lines) + "\n"


def summarize_costs(
    transcripts: RunTranscript | Iterable[RunTranscript],
    hit_cost_factor: float | None = None,
) -> CostReport:
    """Aggregate one or many run ledgers into a CostReport.

    Rows merge by (layer, phase, agent) in first-appearance order, which is
    the engine's canonical ledger order.  Unless overridden, each run's
    effective tokens use that run's configured hit_cost_factor.
    """
    if isinstance(transcripts, RunTranscript):
        transcripts = (transcripts,)
    acc: dict[tuple[int, Phase, str], list[Any]] = {}
    order: list[tuple[int, Phase, str]] = []
    stops: dict[int, int] = {}
    runs = 0
    for t in transcripts:
        runs += 1
        factor = t.config.cache_hit_cost_factor if hit_cost_factor is None else hit_cost_factor
        if t.termination is not None and t.termination.stopped:
            stops[t.termination.layer] = stops.get(t.termination.layer, 0) + 1
        for call in t.calls:
            key = (call.layer, call.phase, call.agent_id)
            if key not in acc:
                acc[key] = [0, 0, 0, 0, 0.0]
                order.append(key)
            cell = acc[key]
            cell[0] += 1
            cell[1] += call.usage.prompt_tokens
            cell[2] += call.usage.cached_prompt_tokens
            cell[3] += call.usage.completion_tokens
            cell[4] += effective_prompt_tokens(call.usage, factor)
    rows = tuple(
        CostRow(
            layer=key[0],
            phase=key[1],
            agent_id=key[2],
            calls=acc[key][0],
            prompt_tokens=acc[key][1],
            cached_prompt_tokens=acc[key][2],
            completion_tokens=acc[key][3],
            effective_prompt_tokens=acc[key][4],
        )
        for key in order
    )
    return CostReport(rows=rows, stop_histogram=tuple(sorted(stops.items())), runs=runs)
