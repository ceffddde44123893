"""Inter-layer engine: history accumulation, synthesis, early stopping.

The residual agent reads the whole round history each time.  Because each
layer's prompt extends the previous one by a single round block, a provider
prefix cache serves everything up to the newest round; the accounting module
relies on that growth pattern.
"""

from __future__ import annotations

from dataclasses import dataclass

from .calls import CallPlan, Dispatcher
from .model import (
    AgentSpec,
    HistoryStack,
    HistoryStackError,
    LayerKind,
    LayerOutput,
    ModelError,
    Phase,
    QueryContext,
    TerminationSignal,
)
from .templates import detect_stop_sentinel, render_residual


@dataclass(frozen=True, slots=True)
class ResidualOutcome:
    """One layer's synthesis result and stop decision.

    When the agent signals a stop it emits only the sentinel, so there is no
    current-layer synthesis; output is then the previous round's answer.
    """

    output: LayerOutput
    signal: TerminationSignal
    raw_completion: str

    def __post_init__(self) -> None:
        if not self.signal.stopped and self.output.text != self.raw_completion:
            raise ModelError("without a stop, the output must be the raw completion")


def push_history(stack: HistoryStack, entry: LayerOutput) -> HistoryStack:
    """Return a new stack with entry appended; layers must strictly increase."""
    new = HistoryStack(stack.entries)
    new.push(entry)
    return new


def advance_stack(stack: HistoryStack, y_l: LayerOutput) -> HistoryStack:
    """Swap the provisional top summary for the layer's accepted synthesis."""
    top = stack.entries[-1] if len(stack) else None
    if top is None or top.kind is not LayerKind.ATTENTION_SUMMARY:
        raise HistoryStackError("stack top must be the provisional summary of the current layer")
    if y_l.kind is not LayerKind.RESIDUAL_SYNTHESIS:
        raise HistoryStackError("replacement must be a residual synthesis")
    new = HistoryStack(stack.entries)
    new.replace_top(y_l)
    return new


async def synthesize(
    ctx: QueryContext,
    stack: HistoryStack,
    agent: AgentSpec,
    es_enabled: bool,
    dispatcher: Dispatcher,
) -> ResidualOutcome:
    """One residual call over the stack [y_1 .. y_{l-1}, ~y_l].

    The stop sentinel is honored only when early stopping is enabled; the
    non-ES prompt variant never instructs the agent to emit it.
    """
    if len(stack) < 2:
        raise ModelError("residual synthesis needs at least two rounds of history")
    layer = stack.entries[-1].layer
    prompt = render_residual(ctx, stack, es_enabled)
    record = await dispatcher.run_one(CallPlan(phase=Phase.RESIDUAL, layer=layer, agent=agent, prompt=prompt))
    raw = record.response
    stopped = es_enabled and detect_stop_sentinel(raw)
    if stopped:
        output = stack.entries[-2]
    else:
        output = LayerOutput(layer=layer, text=raw, kind=LayerKind.RESIDUAL_SYNTHESIS)
    return ResidualOutcome(output=output, signal=TerminationSignal(stopped=stopped, layer=layer), raw_completion=raw)
