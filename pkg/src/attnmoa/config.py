"""Declarative run manifests: roster, backends, and pipeline defaults.

The format is flat key=value lines grouped into sections, parsed with the
standard library.  Dotted section names express the two tables:

    [pipeline]            defaults and run shape
    [backend.main]        one section per backend binding
    [agent.c1]            one section per roster seat, in roster order

Environment variables are never expanded in values; the only environment
coupling is the auth_env key, which names the variable the HTTP backend
reads its bearer token from at request time.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

from .backends import Backend, HttpBackend, LengthModel, MockBackend, ReplayBackend, RetryPolicy
from .model import AgentSpec, AttentionMode, GenParams, ModelError, PipelineConfig, Role


class ConfigError(ModelError):
    """The manifest is missing, malformed, or inconsistent."""


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _as_bool(section: str, key: str, raw: str) -> bool:
    low = raw.strip().lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise ConfigError(f"[{section}] {key} must be a boolean, got {raw!r}")


def _as_int(section: str, key: str, raw: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key} must be an integer, got {raw!r}") from None


def _as_float(section: str, key: str, raw: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key} must be a number, got {raw!r}") from None


@dataclass(frozen=True, slots=True)
class RunSetup:
    """A loaded manifest: the static plan plus live backend bindings."""

    config: PipelineConfig
    backends: Mapping[str, Backend]
    judge_agent: AgentSpec | None = None


def _build_backend(name: str, section: str, opts: dict[str, str], default_seed: int) -> Backend:
    kind = opts.pop("kind", "mock")
    retry = RetryPolicy(
        timeout=_as_float(section, "timeout", opts.pop("timeout", "120")),
        retries=_as_int(section, "retries", opts.pop("retries", "2")),
    )
    max_in_flight = _as_int(section, "max_in_flight", opts.pop("max_in_flight", "8"))
    tokenizer = opts.pop("tokenizer", "approx_chars")
    if kind == "mock":
        backend: Backend = MockBackend(
            name,
            seed=_as_int(section, "seed", opts.pop("seed", str(default_seed))),
            length=LengthModel(
                mean=_as_float(section, "mean_tokens", opts.pop("mean_tokens", "300")),
                std=_as_float(section, "std_tokens", opts.pop("std_tokens", "60")),
            ),
            tokenizer=tokenizer,
            max_in_flight=max_in_flight,
            retry=retry,
        )
    elif kind == "http_openai_compatible":
        try:
            base_url = opts.pop("base_url")
        except KeyError:
            raise ConfigError(f"[{section}] http backend needs base_url") from None
        backend = HttpBackend(
            name,
            base_url=base_url,
            auth_env=opts.pop("auth_env", None),
            tokenizer=tokenizer,
            max_in_flight=max_in_flight,
            retry=retry,
        )
    elif kind == "replay":
        try:
            fixture = opts.pop("fixture")
        except KeyError:
            raise ConfigError(f"[{section}] replay backend needs fixture") from None
        backend = ReplayBackend(name, fixture, tokenizer=tokenizer, max_in_flight=max_in_flight, retry=retry)
    else:
        raise ConfigError(f"[{section}] unknown backend kind {kind!r}")
    if opts:
        raise ConfigError(f"[{section}] unknown keys: {', '.join(sorted(opts))}")
    return backend


def load_config(path: str | Path) -> RunSetup:
    """Parse a manifest file into a validated RunSetup."""
    parser = configparser.ConfigParser(interpolation=None)
    text = Path(path).read_text(encoding="utf-8")
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc

    pipeline = dict(parser["pipeline"]) if parser.has_section("pipeline") else {}
    seed = _as_int("pipeline", "seed", pipeline.pop("seed", "0"))
    gen_defaults = GenParams(
        temperature=_as_float("pipeline", "temperature", pipeline.pop("temperature", "0.7")),
        max_tokens=_as_int("pipeline", "max_tokens", pipeline.pop("max_tokens", "2048")),
    )

    backends: dict[str, Backend] = {}
    roster: list[AgentSpec] = []
    for section in parser.sections():
        if section == "pipeline":
            continue
        if section.startswith("backend."):
            name = section.split(".", 1)[1]
            backends[name] = _build_backend(name, section, dict(parser[section]), seed)
        elif section.startswith("agent."):
            agent_id = section.split(".", 1)[1]
            opts = dict(parser[section])
            try:
                role = Role(opts.pop("role"))
            except KeyError:
                raise ConfigError(f"[{section}] needs a role") from None
            except ValueError:
                raise ConfigError(f"[{section}] unknown role") from None
            try:
                backend_name = opts.pop("backend")
                model = opts.pop("model")
            except KeyError as exc:
                raise ConfigError(f"[{section}] needs {exc.args[0]}") from None
            params = GenParams(
                temperature=_as_float(section, "temperature", opts.pop("temperature", str(gen_defaults.temperature))),
                max_tokens=_as_int(section, "max_tokens", opts.pop("max_tokens", str(gen_defaults.max_tokens))),
            )
            if opts:
                raise ConfigError(f"[{section}] unknown keys: {', '.join(sorted(opts))}")
            roster.append(AgentSpec(agent_id=agent_id, role=role, backend=backend_name, model=model, params=params))
        else:
            raise ConfigError(f"unknown section [{section}]")

    judge = next((a for a in roster if a.role is Role.JUDGE), None)
    pipeline_roster = tuple(a for a in roster if a.role is not Role.JUDGE)
    deadline_raw = pipeline.pop("deadline", "")
    try:
        config = PipelineConfig(
            roster=pipeline_roster,
            layers=_as_int("pipeline", "layers", pipeline.pop("layers", "1")),
            mode=AttentionMode(pipeline.pop("mode", "pairwise")),
            early_stopping=_as_bool("pipeline", "early_stopping", pipeline.pop("early_stopping", "false")),
            caching_enabled=_as_bool("pipeline", "caching_enabled", pipeline.pop("caching_enabled", "true")),
            seed=seed,
            tokenizer=pipeline.pop("tokenizer", "approx_chars"),
            cache_hit_cost_factor=_as_float(
                "pipeline", "cache_hit_cost_factor", pipeline.pop("cache_hit_cost_factor", "0")
            ),
            gen_defaults=gen_defaults,
            max_in_flight=_as_int("pipeline", "max_in_flight", pipeline.pop("max_in_flight", "8")),
            deadline=_as_float("pipeline", "deadline", deadline_raw) if deadline_raw else None,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if pipeline:
        raise ConfigError(f"[pipeline] unknown keys: {', '.join(sorted(pipeline))}")

    missing = {a.backend for a in roster} - set(backends)
    if missing:
        raise ConfigError(f"agents reference unbound backends: {', '.join(sorted(missing))}")
    return RunSetup(config=config, backends=backends, judge_agent=judge)


_MODEL_TAGS = ("alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta")


def default_roster(n_collaborators: int = 3, backend: str = "mock") -> tuple[AgentSpec, ...]:
    """A self-contained roster for config-less runs and sweeps."""
    if n_collaborators > len(_MODEL_TAGS):
        raise ConfigError(f"default roster supports at most {len(_MODEL_TAGS)} collaborators")
    seats = [
        AgentSpec(agent_id=f"c{i + 1}", role=Role.COLLABORATIVE, backend=backend, model=f"model-{_MODEL_TAGS[i]}")
        for i in range(n_collaborators)
    ]
    seats.append(AgentSpec(agent_id="summary", role=Role.SUMMARY, backend=backend, model="model-summary", params=GenParams(temperature=0.0)))
    seats.append(AgentSpec(agent_id="residual", role=Role.RESIDUAL, backend=backend, model="model-residual", params=GenParams(temperature=0.0)))
    return tuple(seats)


def default_setup(
    n_collaborators: int = 3,
    layers: int = 1,
    mode: AttentionMode = AttentionMode.PAIRWISE,
    early_stopping: bool = False,
    seed: int = 0,
    mean_tokens: float = 300.0,
    std_tokens: float = 60.0,
) -> RunSetup:
    """Mock-backed RunSetup used when no manifest is given."""
    config = PipelineConfig(
        roster=default_roster(n_collaborators),
        layers=layers,
        mode=mode,
        early_stopping=early_stopping,
        seed=seed,
    )
    backend = MockBackend("mock", seed=seed, length=LengthModel(mean=mean_tokens, std=std_tokens))
    judge = AgentSpec(agent_id="judge", role=Role.JUDGE, backend="mock", model="model-judge", params=GenParams(temperature=0.0))
    return RunSetup(config=config, backends={"mock": backend}, judge_agent=judge)
