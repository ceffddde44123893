"""Intra-layer engine: sample, critique, aggregate, summarize.

One layer costs N sampling calls, N*(N-1)+N or N+N attention calls depending
on mode, N aggregation calls, and 1 summarization call.  Whatever the mode,
the layer materializes the complete N x N instruction matrix before any
aggregation starts, and every stage commits its results in roster order.

Single-pass completions are supposed to be JSON keyed by peer position.  A
completion with no parsable object gets exactly one re-ask (a real call with
its own ledger entry); if that also fails, the full completion text is
broadcast to every peer.  A parsable but partial object is not re-asked:
missing cells get the full completion text.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .calls import CallPlan, Dispatcher
from .model import (
    AgentResponse,
    AgentSpec,
    AttentionInstruction,
    AttentionKind,
    AttentionMode,
    ModelError,
    Phase,
    QueryContext,
    Stage,
    UsageRecord,
    collaborators,
    summary_agent,
    validate_roster,
)
from .templates import (
    MalformedSuggestionError,
    parse_singlepass,
    render_aggregation,
    render_cross_pairwise,
    render_cross_singlepass,
    render_sampling,
    render_self_attention,
    render_summarization,
)

REASK_LIMIT = 1


@dataclass(frozen=True, slots=True)
class LayerRecord:
    """Everything one attention layer produced."""

    layer: int
    initial: tuple[AgentResponse, ...]
    instructions: tuple[AttentionInstruction, ...]
    refined: tuple[AgentResponse, ...]
    summary: str
    summary_usage: UsageRecord

    def __post_init__(self) -> None:
        n = len(self.initial)
        if len(self.refined) != n:
            raise ModelError("initial and refined response lists must have equal length")
        if len(self.instructions) != n * n:
            raise ModelError(f"instruction matrix must have {n * n} cells, got {len(self.instructions)}")
        diagonal = sum(1 for i in self.instructions if i.kind is AttentionKind.SELF)
        if diagonal != n:
            raise ModelError(f"instruction matrix must have {n} self cells, got {diagonal}")


async def sample_responses(
    ctx: QueryContext,
    prev_output: str | None,
    collabs: Sequence[AgentSpec],
    dispatcher: Dispatcher,
    layer: int,
) -> tuple[AgentResponse, ...]:
    """Issue every collaborator's first answer for the layer concurrently."""
    plans = [
        CallPlan(phase=Phase.SAMPLING, layer=layer, agent=agent, prompt=render_sampling(ctx, prev_output))
        for agent in collabs
    ]
    records = await dispatcher.run_stage(plans)
    return tuple(
        AgentResponse(agent_id=agent.agent_id, layer=layer, stage=Stage.INITIAL, text=r.response, usage=r.usage)
        for agent, r in zip(collabs, records)
    )


def _peer_positions(n: int, advisor: int) -> dict[int, int]:
    """Recipient index -> 1-based position in the advisor's peer enumeration."""
    return {j: pos for pos, j in enumerate((j for j in range(n) if j != advisor), start=1)}


async def compute_attention(
    ctx: QueryContext,
    responses: Sequence[AgentResponse],
    mode: AttentionMode,
    collabs: Sequence[AgentSpec],
    dispatcher: Dispatcher,
    layer: int,
) -> tuple[AttentionInstruction, ...]:
    """Fill the N x N instruction matrix, advisor-major.

    Pairwise mode: one call per ordered pair plus one self call per agent.
    Single-pass mode: one cross call per advisor (parsed into per-peer cells)
    plus one self call per agent.
    """
    n = len(responses)
    if n < 2:
        raise ModelError("attention needs at least two responses")
    if [r.agent_id for r in responses] != [a.agent_id for a in collabs]:
        raise ModelError("responses must be in roster order")

    plans: list[CallPlan] = []
    if mode is AttentionMode.PAIRWISE:
        for i, advisor in enumerate(collabs):
            for j, recipient in enumerate(collabs):
                if i == j:
                    prompt = render_self_attention(ctx, responses[i].text)
                else:
                    prompt = render_cross_pairwise(ctx, responses[i].text, responses[j].text)
                plans.append(
                    CallPlan(
                        phase=Phase.ATTENTION,
                        layer=layer,
                        agent=advisor,
                        prompt=prompt,
                        advisor_id=advisor.agent_id,
                        recipient_id=recipient.agent_id,
                    )
                )
        records = await dispatcher.run_stage(plans)
        cells = []
        for plan, record in zip(plans, records):
            kind = AttentionKind.SELF if plan.advisor_id == plan.recipient_id else AttentionKind.CROSS
            cells.append(
                AttentionInstruction(
                    advisor_id=plan.advisor_id,
                    recipient_id=plan.recipient_id,
                    layer=layer,
                    kind=kind,
                    text=record.response,
                )
            )
        return tuple(cells)

    # single-pass: per advisor, one cross call over all peers, then self
    for i, advisor in enumerate(collabs):
        peers = [responses[j].text for j in range(n) if j != i]
        plans.append(
            CallPlan(
                phase=Phase.ATTENTION,
                layer=layer,
                agent=advisor,
                prompt=render_cross_singlepass(ctx, responses[i].text, peers),
                advisor_id=advisor.agent_id,
                recipient_id=None,
            )
        )
        plans.append(
            CallPlan(
                phase=Phase.ATTENTION,
                layer=layer,
                agent=advisor,
                prompt=render_self_attention(ctx, responses[i].text),
                advisor_id=advisor.agent_id,
                recipient_id=advisor.agent_id,
            )
        )
    records = await dispatcher.run_stage(plans)
    cross_records = {plans[k].advisor_id: records[k] for k in range(len(plans)) if plans[k].recipient_id is None}
    self_records = {plans[k].advisor_id: records[k] for k in range(len(plans)) if plans[k].recipient_id is not None}

    suggestion_maps: dict[str, dict[int, str]] = {}
    reask_plans: list[CallPlan] = []
    reask_advisors: list[str] = []
    for i, advisor in enumerate(collabs):
        record = cross_records[advisor.agent_id]
        try:
            parsed = parse_singlepass(record.response, n_peers=n - 1)
        except MalformedSuggestionError:
            reask_plans.append(
                CallPlan(
                    phase=Phase.ATTENTION,
                    layer=layer,
                    agent=advisor,
                    prompt=render_cross_singlepass(ctx, responses[i].text, [responses[j].text for j in range(n) if j != i]),
                    advisor_id=advisor.agent_id,
                    recipient_id=None,
                    repeat=1,
                )
            )
            reask_advisors.append(advisor.agent_id)
            continue
        suggestion_maps[advisor.agent_id] = {k: text for k, text in parsed.by_index}

    if reask_plans:
        reask_records = await dispatcher.run_stage(reask_plans)
        for advisor_id, record in zip(reask_advisors, reask_records):
            cross_records[advisor_id] = record
            try:
                parsed = parse_singlepass(record.response, n_peers=n - 1)
            except MalformedSuggestionError:
                suggestion_maps[advisor_id] = {}
                continue
            suggestion_maps[advisor_id] = {k: text for k, text in parsed.by_index}

    cells = []
    for i, advisor in enumerate(collabs):
        positions = _peer_positions(n, i)
        full_text = cross_records[advisor.agent_id].response
        by_position = suggestion_maps[advisor.agent_id]
        for j, recipient in enumerate(collabs):
            if i == j:
                cells.append(
                    AttentionInstruction(
                        advisor_id=advisor.agent_id,
                        recipient_id=recipient.agent_id,
                        layer=layer,
                        kind=AttentionKind.SELF,
                        text=self_records[advisor.agent_id].response,
                    )
                )
                continue
            cells.append(
                AttentionInstruction(
                    advisor_id=advisor.agent_id,
                    recipient_id=recipient.agent_id,
                    layer=layer,
                    kind=AttentionKind.CROSS,
                    text=by_position.get(positions[j], full_text),
                )
            )
    return tuple(cells)


def _aggregation_plan(
    ctx: QueryContext,
    response: AgentResponse,
    instructions: Sequence[AttentionInstruction],
    agent: AgentSpec,
    layer: int,
    order: Sequence[str],
) -> CallPlan:
    mine = [i for i in instructions if i.recipient_id == response.agent_id]
    if len(mine) != len(order):
        raise ModelError(
            f"agent {response.agent_id} needs exactly {len(order)} instructions, got {len(mine)}"
        )
    if sum(1 for i in mine if i.kind is AttentionKind.SELF) != 1:
        raise ModelError(f"agent {response.agent_id} needs exactly one self instruction")
    index_of = {agent_id: k for k, agent_id in enumerate(order, start=1)}
    pairs = [(index_of[i.advisor_id], i.text) for i in mine]
    return CallPlan(
        phase=Phase.AGGREGATION,
        layer=layer,
        agent=agent,
        prompt=render_aggregation(ctx, response.text, pairs),
    )


async def aggregate(
    ctx: QueryContext,
    response: AgentResponse,
    instructions: Sequence[AttentionInstruction],
    agent: AgentSpec,
    dispatcher: Dispatcher,
    layer: int,
    order: Sequence[str],
) -> AgentResponse:
    """Refine one agent's answer from its full advice column."""
    record = await dispatcher.run_one(_aggregation_plan(ctx, response, instructions, agent, layer, order))
    return AgentResponse(agent_id=agent.agent_id, layer=layer, stage=Stage.REFINED, text=record.response, usage=record.usage)


async def summarize(
    ctx: QueryContext,
    refined: Sequence[AgentResponse],
    agent: AgentSpec,
    dispatcher: Dispatcher,
    layer: int,
) -> tuple[str, UsageRecord]:
    """Fold the layer's refined answers into its summary."""
    prompt = render_summarization(ctx, [r.text for r in refined])
    record = await dispatcher.run_one(CallPlan(phase=Phase.SUMMARIZATION, layer=layer, agent=agent, prompt=prompt))
    return record.response, record.usage


async def run_attention_layer(
    ctx: QueryContext,
    prev_output: str | None,
    roster: Sequence[AgentSpec],
    mode: AttentionMode,
    dispatcher: Dispatcher,
    layer: int,
) -> LayerRecord:
    """Run the four stages of one layer with a barrier between each."""
    roster = validate_roster(roster)
    collabs = collaborators(roster)
    order = [a.agent_id for a in collabs]

    responses = await sample_responses(ctx, prev_output, collabs, dispatcher, layer)
    instructions = await compute_attention(ctx, responses, mode, collabs, dispatcher, layer)

    plans = [
        _aggregation_plan(ctx, responses[j], instructions, collabs[j], layer, order)
        for j in range(len(collabs))
    ]
    records = await dispatcher.run_stage(plans)
    refined = tuple(
        AgentResponse(agent_id=a.agent_id, layer=layer, stage=Stage.REFINED, text=r.response, usage=r.usage)
        for a, r in zip(collabs, records)
    )

    summary, summary_usage = await summarize(ctx, refined, summary_agent(roster), dispatcher, layer)
    return LayerRecord(
        layer=layer,
        initial=responses,
        instructions=instructions,
        refined=refined,
        summary=summary,
        summary_usage=summary_usage,
    )
