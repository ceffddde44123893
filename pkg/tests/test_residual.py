import asyncio

import pytest

from attnmoa.accounting import CacheModel
from attnmoa.backends import Backend, BackendKind
from attnmoa.calls import Dispatcher
from attnmoa.model import (
    AgentSpec,
    HistoryStack,
    HistoryStackError,
    LayerKind,
    LayerOutput,
    ModelError,
    Phase,
    QueryContext,
    Role,
)
from attnmoa.residual import ResidualOutcome, advance_stack, push_history, synthesize
from attnmoa.model import TerminationSignal

CTX = QueryContext(query="Summarize the debate.")
AGENT = AgentSpec(agent_id="residual", role=Role.RESIDUAL, backend="scripted", model="m")


def _summary(layer, text=None):
    return LayerOutput(layer=layer, text=text or f"summary {layer}", kind=LayerKind.ATTENTION_SUMMARY)


def _synthesis(layer, text=None):
    return LayerOutput(layer=layer, text=text or f"synthesis {layer}", kind=LayerKind.RESIDUAL_SYNTHESIS)


class _Scripted(Backend):
    kind = BackendKind.MOCK

    def __init__(self, text):
        super().__init__("scripted")
        self.text = text
        self.prompts = []

    async def _attempt(self, request):
        self.prompts.append(request.canonical_text())
        return self.text, None


def _synthesize(stack, text, es_enabled=True):
    backend = _Scripted(text)
    dispatcher = Dispatcher({"scripted": backend}, CacheModel())
    outcome = asyncio.run(synthesize(CTX, stack, AGENT, es_enabled, dispatcher))
    return outcome, backend, dispatcher


class TestStackOps:
    def test_push_history_returns_new_stack(self):
        stack = HistoryStack()
        grown = push_history(stack, _summary(1))
        assert len(stack) == 0
        assert len(grown) == 1

    def test_push_history_enforces_increasing_layers(self):
        stack = push_history(HistoryStack(), _summary(1))
        with pytest.raises(HistoryStackError):
            push_history(stack, _summary(1))

    def test_advance_stack_swaps_top_for_synthesis(self):
        stack = HistoryStack([_synthesis(1), _summary(2)])
        advanced = advance_stack(stack, _synthesis(2, "y2"))
        assert advanced.entries[-1].text == "y2"
        assert advanced.entries[-1].kind is LayerKind.RESIDUAL_SYNTHESIS
        # the original stack is untouched
        assert stack.entries[-1].kind is LayerKind.ATTENTION_SUMMARY

    def test_advance_stack_rejects_wrong_kinds(self):
        with pytest.raises(HistoryStackError):
            advance_stack(HistoryStack([_synthesis(1)]), _synthesis(1))
        with pytest.raises(HistoryStackError):
            advance_stack(HistoryStack([_summary(1)]), _summary(1))
        with pytest.raises(HistoryStackError):
            advance_stack(HistoryStack(), _synthesis(1))


class TestSynthesize:
    def _stack(self, depth=2):
        entries = [_synthesis(k) for k in range(1, depth)] + [_summary(depth)]
        return HistoryStack(entries)

    def test_normal_synthesis(self):
        outcome, backend, dispatcher = _synthesize(self._stack(), "the synthesis text", es_enabled=False)
        assert not outcome.signal.stopped
        assert outcome.output.text == "the synthesis text"
        assert outcome.output.kind is LayerKind.RESIDUAL_SYNTHESIS
        assert outcome.output.layer == 2
        assert dispatcher.calls[0].phase is Phase.RESIDUAL

    def test_prompt_enumerates_every_round(self):
        _, backend, _ = _synthesize(self._stack(3), "text", es_enabled=False)
        prompt = backend.prompts[0]
        assert "Response of historical round 1:\nsynthesis 1" in prompt
        assert "Response of historical round 2:\nsynthesis 2" in prompt
        assert "Response of historical round 3:\nsummary 3" in prompt

    def test_stop_clause_only_with_es(self):
        _, with_es, _ = _synthesize(self._stack(), "text", es_enabled=True)
        _, without, _ = _synthesize(self._stack(), "text", es_enabled=False)
        clause = "should be stopped"
        assert clause in with_es.prompts[0]
        assert clause not in without.prompts[0]

    def test_stop_falls_back_to_previous_round(self):
        stack = HistoryStack([_synthesis(1, "y1"), _summary(2)])
        outcome, _, _ = _synthesize(stack, "**Attention-MoA should be stopped**", es_enabled=True)
        assert outcome.signal == TerminationSignal(stopped=True, layer=2)
        assert outcome.output.text == "y1"
        assert outcome.output.layer == 1

    def test_sentinel_ignored_when_es_disabled(self):
        outcome, _, _ = _synthesize(self._stack(), "**Attention-MoA should be stopped**", es_enabled=False)
        assert not outcome.signal.stopped
        assert outcome.output.text == "**Attention-MoA should be stopped**"

    def test_needs_two_rounds(self):
        stack = HistoryStack([_summary(1)])
        with pytest.raises(ModelError):
            asyncio.run(
                synthesize(CTX, stack, AGENT, False, Dispatcher({"scripted": _Scripted("x")}, CacheModel()))
            )


class TestResidualOutcome:
    def test_non_stop_output_must_echo_raw(self):
        with pytest.raises(ModelError):
            ResidualOutcome(
                output=_synthesis(2, "different"),
                signal=TerminationSignal(stopped=False, layer=2),
                raw_completion="raw",
            )
