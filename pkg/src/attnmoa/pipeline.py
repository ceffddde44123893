"""The L-layer executor.

Layer 1 runs the attention module alone and its summary is the layer output.
Every deeper layer runs attention, pushes the provisional summary onto the
round history, and asks the residual agent to synthesize; a stop signal ends
the run with the previous round's answer and skips all remaining layers
outright.  Layers are strictly sequential; concurrency lives inside stages.
"""

from __future__ import annotations

import asyncio
from dataclasses import dataclass
from typing import Mapping

from .accounting import CacheModel
from .attention import run_attention_layer
from .backends import Backend
from .calls import Dispatcher, StageError
from .model import (
    HistoryStack,
    LayerKind,
    LayerOutput,
    LayerTranscript,
    PipelineConfig,
    QueryContext,
    ResidualRecord,
    RunTranscript,
    TerminationSignal,
    residual_agent,
)
from .residual import advance_stack, push_history, synthesize


class PipelineRunError(RuntimeError):
    """A run aborted; the partial transcript is attached, marked failed."""

    def __init__(self, message: str, transcript: RunTranscript) -> None:
        super().__init__(message)
        self.transcript = transcript


@dataclass(frozen=True, slots=True)
class LayerInput:
    """u_l: the conversation plus, beyond layer 1, the previous layer's output."""

    ctx: QueryContext
    prev_text: str | None


def build_layer_input(ctx: QueryContext, prev: LayerOutput | None) -> LayerInput:
    return LayerInput(ctx=ctx, prev_text=None if prev is None else prev.text)


async def _run(
    ctx: QueryContext,
    config: PipelineConfig,
    dispatcher: Dispatcher,
    layers: list[LayerTranscript],
) -> RunTranscript:
    residual = residual_agent(config.roster)
    stack = HistoryStack()
    prev: LayerOutput | None = None
    termination: TerminationSignal | None = None
    skipped: tuple[int, ...] = ()

    for layer in range(1, config.layers + 1):
        u = build_layer_input(ctx, prev)
        record = await run_attention_layer(u.ctx, u.prev_text, config.roster, config.mode, dispatcher, layer)
        summary_out = LayerOutput(layer=layer, text=record.summary, kind=LayerKind.ATTENTION_SUMMARY)
        stack = push_history(stack, summary_out)

        residual_rec: ResidualRecord | None = None
        if layer == 1:
            output = summary_out
        else:
            outcome = await synthesize(ctx, stack, residual, config.early_stopping, dispatcher)
            residual_rec = ResidualRecord(
                raw_completion=outcome.raw_completion,
                stopped=outcome.signal.stopped,
                output=outcome.output.text,
            )
            output = outcome.output
            if outcome.signal.stopped:
                termination = outcome.signal
                skipped = tuple(range(layer + 1, config.layers + 1))
            else:
                stack = advance_stack(stack, outcome.output)

        layers.append(
            LayerTranscript(
                layer=layer,
                initial=tuple((r.agent_id, r.text) for r in record.initial),
                instructions=record.instructions,
                refined=tuple((r.agent_id, r.text) for r in record.refined),
                summary=record.summary,
                output=output,
                residual=residual_rec,
            )
        )
        if termination is not None:
            break
        prev = output

    return RunTranscript(
        config=config,
        query=ctx,
        layers=tuple(layers),
        calls=tuple(dispatcher.calls),
        final_output=layers[-1].output.text,
        termination=termination,
        skipped_layers=skipped,
    )


async def run_async(
    ctx: QueryContext,
    config: PipelineConfig,
    backends: Mapping[str, Backend],
) -> RunTranscript:
    """Execute one run; raises PipelineRunError with the partial transcript on failure."""
    cache = CacheModel(
        tokenizer=config.tokenizer,
        hit_cost_factor=config.cache_hit_cost_factor,
        enabled=config.caching_enabled,
    )
    dispatcher = Dispatcher(backends, cache)
    layers: list[LayerTranscript] = []
    try:
        if config.deadline is not None:
            return await asyncio.wait_for(_run(ctx, config, dispatcher, layers), timeout=config.deadline)
        return await _run(ctx, config, dispatcher, layers)
    except (StageError, asyncio.TimeoutError) as exc:
        message = "run deadline exceeded" if isinstance(exc, asyncio.TimeoutError) else str(exc)
        partial = RunTranscript(
            config=config,
            query=ctx,
            layers=tuple(layers),
            calls=tuple(dispatcher.calls),
            final_output="",
            status="failed",
            error=message,
        )
        raise PipelineRunError(message, partial) from exc


def run(ctx: QueryContext, config: PipelineConfig, backends: Mapping[str, Backend]) -> RunTranscript:
    """Synchronous wrapper around run_async."""
    return asyncio.run(run_async(ctx, config, backends))
