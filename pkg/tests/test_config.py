import json

import pytest

from attnmoa.backends import HttpBackend, MockBackend, ReplayBackend
from attnmoa.config import ConfigError, default_roster, default_setup, load_config
from attnmoa.model import AttentionMode, Role

MANIFEST = """
[pipeline]
layers = 3
mode = singlepass
early_stopping = yes
seed = 42
temperature = 0.5
max_tokens = 512
cache_hit_cost_factor = 0.1

[backend.main]
kind = mock
mean_tokens = 80
std_tokens = 10

[agent.c1]
role = collaborative
backend = main
model = alpha

[agent.c2]
role = collaborative
backend = main
model = beta
temperature = 0.9

[agent.summary]
role = summary
backend = main
model = gamma
temperature = 0

[agent.residual]
role = residual
backend = main
model = gamma
temperature = 0
"""


def _load(tmp_path, text):
    path = tmp_path / "run.ini"
    path.write_text(text, encoding="utf-8")
    return load_config(path)


class TestLoad:
    def test_happy_path(self, tmp_path):
        setup = _load(tmp_path, MANIFEST)
        cfg = setup.config
        assert cfg.layers == 3
        assert cfg.mode is AttentionMode.SINGLEPASS
        assert cfg.early_stopping is True
        assert cfg.seed == 42
        assert cfg.cache_hit_cost_factor == 0.1
        assert [a.agent_id for a in cfg.roster] == ["c1", "c2", "summary", "residual"]
        assert isinstance(setup.backends["main"], MockBackend)
        assert setup.judge_agent is None

    def test_gen_defaults_flow_into_agents(self, tmp_path):
        setup = _load(tmp_path, MANIFEST)
        by_id = {a.agent_id: a for a in setup.config.roster}
        assert by_id["c1"].params.temperature == 0.5
        assert by_id["c1"].params.max_tokens == 512
        # explicit per-agent values win
        assert by_id["c2"].params.temperature == 0.9
        assert by_id["summary"].params.temperature == 0.0

    def test_judge_seat_extracted_from_roster(self, tmp_path):
        text = MANIFEST + "\n[agent.judge]\nrole = judge\nbackend = main\nmodel = arbiter\n"
        setup = _load(tmp_path, text)
        assert setup.judge_agent is not None
        assert setup.judge_agent.agent_id == "judge"
        assert all(a.role is not Role.JUDGE for a in setup.config.roster)

    def test_http_backend(self, tmp_path):
        text = MANIFEST.replace(
            "[backend.main]\nkind = mock\nmean_tokens = 80\nstd_tokens = 10",
            "[backend.main]\nkind = http_openai_compatible\nbase_url = http://127.0.0.1:9000/v1\nauth_env = API_KEY",
        )
        setup = _load(tmp_path, text)
        backend = setup.backends["main"]
        assert isinstance(backend, HttpBackend)
        assert backend.auth_env == "API_KEY"

    def test_replay_backend(self, tmp_path):
        fixture = tmp_path / "calls.json"
        fixture.write_text(json.dumps([]), encoding="utf-8")
        text = MANIFEST.replace(
            "[backend.main]\nkind = mock\nmean_tokens = 80\nstd_tokens = 10",
            f"[backend.main]\nkind = replay\nfixture = {fixture}",
        )
        setup = _load(tmp_path, text)
        assert isinstance(setup.backends["main"], ReplayBackend)


class TestErrors:
    @pytest.mark.parametrize(
        "mangle, fragment",
        [
            (lambda s: s.replace("[agent.c1]", "[bogus.c1]"), "unknown section"),
            (lambda s: s.replace("role = collaborative", "role = wizard", 1), "unknown role"),
            (lambda s: s.replace("layers = 3", "layers = many"), "integer"),
            (lambda s: s.replace("early_stopping = yes", "early_stopping = maybe"), "boolean"),
            (lambda s: s.replace("backend = main\nmodel = alpha", "backend = other\nmodel = alpha"), "unbound"),
            (lambda s: s + "\n[agent.extra]\nrole = collaborative\nbackend = main\nmodel = x\ncolour = red\n", "unknown keys"),
            (lambda s: s.replace("layers = 3", "layers = 3\nwobble = 1"), "unknown keys"),
            (lambda s: s.replace("kind = mock", "kind = quantum"), "unknown backend kind"),
        ],
    )
    def test_rejects_bad_manifest(self, tmp_path, mangle, fragment):
        with pytest.raises(ConfigError, match=fragment):
            _load(tmp_path, mangle(MANIFEST))

    def test_http_requires_base_url(self, tmp_path):
        text = MANIFEST.replace("kind = mock", "kind = http_openai_compatible")
        with pytest.raises(ConfigError, match="base_url"):
            _load(tmp_path, text)

    def test_roster_shape_still_enforced(self, tmp_path):
        text = MANIFEST.replace("[agent.residual]", "[agent.residual2]").replace(
            "role = residual", "role = collaborative"
        )
        with pytest.raises(ConfigError):
            _load(tmp_path, text)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_config(tmp_path / "absent.ini")


class TestDefaults:
    def test_default_roster_shape(self):
        roster = default_roster(4)
        assert [a.role for a in roster] == [Role.COLLABORATIVE] * 4 + [Role.SUMMARY, Role.RESIDUAL]
        assert roster[-2].params.temperature == 0.0
        assert roster[-1].params.temperature == 0.0
        assert roster[0].params.temperature == 0.7

    def test_default_roster_bounds(self):
        with pytest.raises(ConfigError):
            default_roster(9)

    def test_default_setup(self):
        setup = default_setup(n_collaborators=2, layers=2, seed=5)
        assert setup.config.layers == 2
        assert setup.config.seed == 5
        assert set(setup.backends) == {"mock"}
        assert setup.judge_agent is not None
        assert setup.judge_agent.role is Role.JUDGE
