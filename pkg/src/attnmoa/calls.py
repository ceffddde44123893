"""Stage dispatch: concurrent fan-out with a deterministic ledger.

A stage is a batch of calls with no data dependencies between them.  Cache
observations happen sequentially in plan order before anything is dispatched,
and ledger entries are committed in plan order after every call has finished,
so the transcript is identical no matter how the event loop interleaves the
actual I/O.  A stage is also a barrier: callers only see results once the
whole batch is done.
"""

from __future__ import annotations

import asyncio
from dataclasses import dataclass
from typing import Mapping, Sequence

from .accounting import CacheModel, count_tokens, prompt_text
from .backends import Backend, ChatRequest
from .model import AgentSpec, CallRecord, ModelError, Phase, UsageRecord
from .templates import RenderedPrompt


class UnknownBackendError(ModelError):
    """An agent references a backend name with no live binding."""


class StageError(RuntimeError):
    """A call in a stage failed; the run must abort."""

    def __init__(self, phase: Phase, layer: int, agent_id: str, cause: BaseException) -> None:
        super().__init__(f"{phase.value} call failed at layer {layer} for agent {agent_id}: {cause}")
        self.phase = phase
        self.layer = layer
        self.agent_id = agent_id
        self.cause = cause


@dataclass(frozen=True, slots=True)
class CallPlan:
    """One intended backend call, fully rendered."""

    phase: Phase
    layer: int
    agent: AgentSpec
    prompt: RenderedPrompt
    advisor_id: str | None = None
    recipient_id: str | None = None
    repeat: int = 0


class Dispatcher:
    """Routes plans to named backends and owns the run's call ledger."""

    def __init__(self, backends: Mapping[str, Backend], cache: CacheModel) -> None:
        self.backends = dict(backends)
        self.cache = cache
        self.calls: list[CallRecord] = []

    def backend_for(self, agent: AgentSpec) -> Backend:
        try:
            return self.backends[agent.backend]
        except KeyError:
            raise UnknownBackendError(f"agent {agent.agent_id!r} needs backend {agent.backend!r}, which is not bound") from None

    async def run_stage(self, plans: Sequence[CallPlan]) -> list[CallRecord]:
        """Issue a batch concurrently; commit and return records in plan order.

        On failure the first failing plan in plan order wins (not the first
        to fail in wall-clock time), after the whole batch has settled.
        """
        prepared: list[tuple[CallPlan, Backend, int, ChatRequest]] = []
        for plan in plans:
            backend = self.backend_for(plan.agent)
            joined = prompt_text(plan.prompt.system, plan.prompt.user)
            cached = self.cache.observe(backend.name, plan.agent.agent_id, joined)
            request = ChatRequest(
                agent_id=plan.agent.agent_id,
                model=plan.agent.model,
                messages=(("user", plan.prompt.user),),
                system=plan.prompt.system,
                params=plan.agent.params,
            )
            prepared.append((plan, backend, cached, request))
        results = await asyncio.gather(
            *(backend.complete(request) for _, backend, _, request in prepared),
            return_exceptions=True,
        )
        for (plan, _, _, _), result in zip(prepared, results):
            if isinstance(result, BaseException):
                raise StageError(plan.phase, plan.layer, plan.agent.agent_id, result) from result
        records: list[CallRecord] = []
        for (plan, backend, cached, request), result in zip(prepared, results):
            usage = UsageRecord(
                phase=plan.phase,
                layer=plan.layer,
                agent_id=plan.agent.agent_id,
                prompt_tokens=count_tokens(request.canonical_text(), self.cache.tokenizer),
                completion_tokens=count_tokens(result.text, self.cache.tokenizer),
                cached_prompt_tokens=cached,
                reported_prompt_tokens=result.reported_usage[0] if result.reported_usage else None,
                reported_completion_tokens=result.reported_usage[1] if result.reported_usage else None,
            )
            record = CallRecord(
                index=len(self.calls),
                usage=usage,
                system=plan.prompt.system,
                user=plan.prompt.user,
                response=result.text,
                advisor_id=plan.advisor_id,
                recipient_id=plan.recipient_id,
                repeat=plan.repeat,
            )
            self.calls.append(record)
            records.append(record)
        return records

    async def run_one(self, plan: CallPlan) -> CallRecord:
        return (await self.run_stage([plan]))[0]
