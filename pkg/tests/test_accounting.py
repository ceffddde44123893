import pytest

from attnmoa.accounting import (
    CacheModel,
    CostReport,
    TokenizerError,
    apply_cache,
    count_tokens,
    effective_prompt_tokens,
    effective_tokens,
    prompt_text,
    register_tokenizer,
    resolve_tokenizer,
    summarize_costs,
)
from attnmoa.model import ModelError, Phase, UsageRecord


def brute_force_cached(prompts: list[str], tokenizer: str = "approx_chars") -> list[int]:
    """Independent oracle: longest common prefix against every earlier prompt.

    Quadratic on purpose; the engine uses a sorted-neighbour shortcut and the
    two must never be collapsed into one implementation.
    """
    out = []
    for i, prompt in enumerate(prompts):
        best = 0
        for prior in prompts[:i]:
            k = 0
            limit = min(len(prompt), len(prior))
            while k < limit and prompt[k] == prior[k]:
                k += 1
            best = max(best, k)
        out.append(count_tokens(prompt[:best], tokenizer))
    return out


class TestTokenizers:
    def test_approx_chars_is_ceil_div_four(self):
        assert count_tokens("", "approx_chars") == 0
        assert count_tokens("a", "approx_chars") == 1
        assert count_tokens("abcd", "approx_chars") == 1
        assert count_tokens("abcde", "approx_chars") == 2

    def test_whitespace_counts_words(self):
        assert count_tokens("one two  three\nfour", "whitespace") == 4
        assert count_tokens("   ", "whitespace") == 0

    def test_unknown_name_raises(self):
        with pytest.raises(TokenizerError):
            resolve_tokenizer("nope")

    def test_register_external_hook(self):
        spec = register_tokenizer("test_bytes", lambda s: len(s.encode("utf-8")))
        assert resolve_tokenizer("test_bytes") is spec
        assert count_tokens("héllo", "test_bytes") == 6

    def test_negative_count_rejected(self):
        register_tokenizer("test_negative", lambda s: -1)
        with pytest.raises(TokenizerError):
            count_tokens("x", "test_negative")


class TestPromptText:
    def test_joins_system_and_user(self):
        assert prompt_text("sys", "usr") == "sys\n\nusr"
        assert prompt_text(None, "usr") == "usr"
        assert prompt_text("", "usr") == "usr"


class TestCacheModel:
    def test_matches_brute_force_oracle(self):
        prompts = [
            "alpha beta gamma",
            "alpha beta delta",
            "alpha beta gamma epsilon",
            "zeta",
            "alpha",
            "alpha beta gamma epsilon theta",
        ]
        cache = CacheModel()
        got = [cache.observe("b", "a", p) for p in prompts]
        assert got == brute_force_cached(prompts)

    def test_scopes_are_isolated(self):
        cache = CacheModel()
        assert cache.observe("b", "a1", "shared prefix one") == 0
        assert cache.observe("b", "a2", "shared prefix two") == 0
        assert cache.observe("b2", "a1", "shared prefix three") == 0

    def test_disabled_cache_reports_zero_and_stores_nothing(self):
        cache = CacheModel(enabled=False)
        assert cache.observe("b", "a", "same text") == 0
        assert cache.observe("b", "a", "same text") == 0

    def test_identical_prompt_is_a_full_hit(self):
        cache = CacheModel()
        text = "word " * 50
        cache.observe("b", "a", text)
        assert cache.observe("b", "a", text) == count_tokens(text)

    def test_factor_out_of_range(self):
        with pytest.raises(ModelError):
            CacheModel(hit_cost_factor=1.5)

    def test_measure_builds_usage(self):
        cache = CacheModel()
        usage = cache.measure(Phase.SAMPLING, 1, "b", "a", "sys", "usr", "out")
        assert usage.prompt_tokens == count_tokens("sys\n\nusr")
        assert usage.completion_tokens == count_tokens("out")
        assert usage.cached_prompt_tokens == 0
        again = cache.measure(Phase.SAMPLING, 1, "b", "a", "sys", "usr", "out")
        assert again.cached_prompt_tokens == usage.prompt_tokens


class TestEffectiveTokens:
    def _usage(self, prompt=100, cached=40, completion=10):
        return UsageRecord(
            phase=Phase.SAMPLING,
            layer=1,
            agent_id="a",
            prompt_tokens=prompt,
            completion_tokens=completion,
            cached_prompt_tokens=cached,
        )

    def test_factor_zero_subtracts_cached(self):
        assert effective_prompt_tokens(self._usage(), 0.0) == 60
        assert effective_tokens(self._usage(), 0.0) == 70

    def test_factor_one_is_raw(self):
        assert effective_prompt_tokens(self._usage(), 1.0) == 100

    def test_fractional_factor(self):
        assert effective_prompt_tokens(self._usage(), 0.25) == 60 + 10

    def test_apply_cache_copies(self):
        usage = self._usage(cached=0)
        filled = apply_cache(usage, 7)
        assert filled.cached_prompt_tokens == 7
        assert usage.cached_prompt_tokens == 0
        assert filled.prompt_tokens == usage.prompt_tokens


class TestCostReport:
    def test_totals_equal_sum_over_entries(self, run_mock):
        t = run_mock(n=3, layers=2)
        report = summarize_costs(t)
        assert report.total_calls == len(t.calls)
        assert report.total_prompt_tokens == sum(u.prompt_tokens for u in t.ledger)
        assert report.total_cached_prompt_tokens == sum(u.cached_prompt_tokens for u in t.ledger)
        assert report.total_completion_tokens == sum(u.completion_tokens for u in t.ledger)
        assert report.total_effective_tokens == pytest.approx(
            sum(effective_tokens(u, 0.0) for u in t.ledger)
        )

    def test_per_phase_conservation(self, run_mock):
        t = run_mock(n=3, layers=2)
        report = summarize_costs(t)
        for phase, (raw, cached, _) in report.by_phase().items():
            in_ledger = [u for u in t.ledger if u.phase is phase]
            assert raw == sum(u.prompt_tokens for u in in_ledger)
            assert cached == sum(u.cached_prompt_tokens for u in in_ledger)

    def test_effective_equals_raw_minus_cached_at_factor_zero(self, run_mock):
        report = summarize_costs(run_mock(n=3, layers=2))
        assert report.total_effective_prompt_tokens == pytest.approx(
            report.total_prompt_tokens - report.total_cached_prompt_tokens
        )

    def test_factor_override(self, run_mock):
        t = run_mock(n=2, layers=1)
        raw = summarize_costs(t, hit_cost_factor=1.0)
        assert raw.total_effective_prompt_tokens == pytest.approx(raw.total_prompt_tokens)

    def test_csv_shape(self, run_mock):
        report = summarize_costs(run_mock(n=2, layers=1))
        lines = report.to_csv().splitlines()
        assert lines[0] == "layer,phase,agent,raw,cached,effective"
        assert len(lines) == len(report.rows) + 1

    def test_multi_run_merge_and_stop_histogram(self, run_mock):
        stopped = run_mock(n=2, layers=3, early_stopping=True, query="[stop@2] Describe rain.")
        plain = run_mock(n=2, layers=1)
        report = summarize_costs([stopped, plain])
        assert report.runs == 2
        assert report.stop_histogram == ((2, 1),)
        assert report.total_calls == len(stopped.calls) + len(plain.calls)

    def test_empty_report(self):
        report = summarize_costs([])
        assert report.runs == 0
        assert report.total_calls == 0
        assert report.to_csv().splitlines() == ["layer,phase,agent,raw,cached,effective"]

    def test_json_round_trip_is_canonical(self, run_mock):
        report = summarize_costs(run_mock(n=2, layers=1))
        assert report.to_json().endswith("\n")
        assert report.to_json() == CostReport(
            rows=report.rows, stop_histogram=report.stop_histogram, runs=report.runs
        ).to_json()
