import json
import subprocess
import sys

import pytest

from attnmoa.cli import EXIT_OK, EXIT_PARTIAL_FAILURE, EXIT_RUN_FAILURE, EXIT_USAGE, main

FAST = ["--mean-tokens", "40", "--std-tokens", "8"]


def _main(*argv):
    return main(list(argv))


class TestUsageErrors:
    def test_unknown_flag(self, capsys):
        with pytest.raises(SystemExit) as info:
            _main("run", "--query", "x", "--bogus")
        assert info.value.code == EXIT_USAGE

    def test_missing_required_flag(self):
        with pytest.raises(SystemExit) as info:
            _main("run")
        assert info.value.code == EXIT_USAGE

    def test_missing_subcommand(self):
        with pytest.raises(SystemExit) as info:
            _main()
        assert info.value.code == EXIT_USAGE

    def test_http_without_base_url(self, capsys):
        assert _main("run", "--query", "x", "--backend", "http") == EXIT_USAGE
        assert "base-url" in capsys.readouterr().err

    def test_missing_dataset_file(self, tmp_path, capsys):
        code = _main("dataset", str(tmp_path / "absent.jsonl"), "--outdir", str(tmp_path / "out"))
        assert code == EXIT_USAGE


class TestRun:
    def test_prints_final_output(self, capsys):
        assert _main("run", "--query", "Name a tree.", *FAST) == EXIT_OK
        captured = capsys.readouterr()
        assert captured.out.strip()
        assert "calls:" in captured.err

    def test_same_seed_same_transcript_bytes(self, tmp_path, capsys):
        a = tmp_path / "a.json"
        b = tmp_path / "b.json"
        assert _main("run", "--query", "Name a tree.", "--seed", "7", "--out", str(a), *FAST) == EXIT_OK
        assert _main("run", "--query", "Name a tree.", "--seed", "7", "--out", str(b), *FAST) == EXIT_OK
        assert a.read_bytes() == b.read_bytes()

    def test_seed_flag_changes_output(self, tmp_path):
        a = tmp_path / "a.json"
        b = tmp_path / "b.json"
        _main("run", "--query", "Name a tree.", "--seed", "1", "--out", str(a), *FAST)
        _main("run", "--query", "Name a tree.", "--seed", "2", "--out", str(b), *FAST)
        assert json.loads(a.read_text())["final_output"] != json.loads(b.read_text())["final_output"]

    def test_flags_reach_config(self, tmp_path):
        out = tmp_path / "t.json"
        _main(
            "run", "--query", "Q.", "--layers", "2", "--attention", "singlepass",
            "--agents-n", "2", "--early-stop", "--cache-factor", "0.5", "--out", str(out), *FAST,
        )
        doc = json.loads(out.read_text())
        cfg = doc["config"]
        assert cfg["layers"] == 2
        assert cfg["mode"] == "singlepass"
        assert cfg["early_stopping"] is True
        assert cfg["cache_hit_cost_factor"] == 0.5
        assert len([a for a in cfg["roster"] if a["role"] == "collaborative"]) == 2

    def test_record_then_replay_identical(self, tmp_path):
        fixture = tmp_path / "fixture.json"
        first = tmp_path / "first.json"
        second = tmp_path / "second.json"
        args = ["run", "--query", "Name a tree.", "--layers", "2", *FAST]
        assert _main(*args, "--record", str(fixture), "--out", str(first)) == EXIT_OK
        assert _main(*args, "--replay", str(fixture), "--out", str(second)) == EXIT_OK
        assert first.read_bytes() == second.read_bytes()

    def test_deadline_failure_exits_two_with_partial_transcript(self, tmp_path, capsys):
        out = tmp_path / "t.json"
        code = _main("run", "--query", "Q.", "--deadline", "0.000001", "--out", str(out), *FAST)
        assert code == EXIT_RUN_FAILURE
        assert "run failed" in capsys.readouterr().err
        assert json.loads(out.read_text())["status"] == "failed"

    def test_config_manifest_drives_run(self, tmp_path, capsys):
        manifest = tmp_path / "run.ini"
        manifest.write_text(
            "[pipeline]\nlayers = 2\nseed = 3\n\n"
            "[backend.m]\nkind = mock\nmean_tokens = 40\nstd_tokens = 8\n\n"
            "[agent.c1]\nrole = collaborative\nbackend = m\nmodel = x\n\n"
            "[agent.c2]\nrole = collaborative\nbackend = m\nmodel = y\n\n"
            "[agent.summary]\nrole = summary\nbackend = m\nmodel = z\n\n"
            "[agent.residual]\nrole = residual\nbackend = m\nmodel = z\n",
            encoding="utf-8",
        )
        out = tmp_path / "t.json"
        assert _main("run", "--config", str(manifest), "--query", "Q.", "--out", str(out)) == EXIT_OK
        assert json.loads(out.read_text())["config"]["layers"] == 2


class TestDataset:
    def _dataset(self, tmp_path, rows):
        path = tmp_path / "d.jsonl"
        path.write_text("\n".join(json.dumps(r) for r in rows) + "\n", encoding="utf-8")
        return path

    def test_writes_transcripts_and_report(self, tmp_path, capsys):
        data = self._dataset(tmp_path, [{"id": "a", "instruction": "One."}, {"id": "b", "instruction": "Two."}])
        outdir = tmp_path / "out"
        code = _main("dataset", str(data), "--outdir", str(outdir), "--agents-n", "2", *FAST)
        assert code == EXIT_OK
        assert (outdir / "a.json").exists() and (outdir / "b.json").exists()
        assert (outdir / "report.json").exists()
        assert (outdir / "depth.csv").exists()
        assert "entries: 2, failed: 0" in capsys.readouterr().out

    def test_failed_entries_exit_partial(self, tmp_path, capsys):
        data = self._dataset(tmp_path, [{"id": "a", "instruction": "One."}])
        outdir = tmp_path / "out"
        code = _main(
            "dataset", str(data), "--outdir", str(outdir), "--agents-n", "2",
            "--deadline", "0.000001", *FAST,
        )
        assert code == EXIT_PARTIAL_FAILURE
        captured = capsys.readouterr()
        assert "failed: 1" in captured.out
        assert "failed a:" in captured.err
        # the partial transcript is still written
        assert json.loads((outdir / "a.json").read_text())["status"] == "failed"

    def test_unsafe_entry_ids_sanitized(self, tmp_path):
        data = self._dataset(tmp_path, [{"id": "a/b:c", "instruction": "One."}])
        outdir = tmp_path / "out"
        assert _main("dataset", str(data), "--outdir", str(outdir), "--agents-n", "2", *FAST) == EXIT_OK
        assert (outdir / "a_b_c.json").exists()


class TestJudge:
    def _answers(self, tmp_path, name, rows):
        path = tmp_path / name
        path.write_text("\n".join(json.dumps(r) for r in rows) + "\n", encoding="utf-8")
        return path

    def test_judges_and_reports(self, tmp_path, capsys):
        a = self._answers(tmp_path, "a.jsonl", [{"id": "q", "output": "First.", "instruction": "Ask."}])
        b = self._answers(tmp_path, "b.jsonl", [{"id": "q", "output": "Second."}])
        out = tmp_path / "verdicts.json"
        assert _main("judge", str(a), str(b), "--out", str(out)) == EXIT_OK
        assert "pairs: 1," in capsys.readouterr().out
        doc = json.loads(out.read_text())
        assert doc["summary"]["pairs"] == 1

    def test_swapped_files_preserve_winner_counts(self, tmp_path, capsys):
        rows_a = [{"id": "q1", "output": "Alpha answer.", "instruction": "Ask one."},
                  {"id": "q2", "output": "Beta answer.", "instruction": "Ask two."}]
        rows_b = [{"id": "q1", "output": "Gamma answer.", "instruction": "Ask one."},
                  {"id": "q2", "output": "Delta answer.", "instruction": "Ask two."}]
        a = self._answers(tmp_path, "a.jsonl", rows_a)
        b = self._answers(tmp_path, "b.jsonl", rows_b)
        out_fwd = tmp_path / "fwd.json"
        out_rev = tmp_path / "rev.json"
        assert _main("judge", str(a), str(b), "--seed", "4", "--out", str(out_fwd)) == EXIT_OK
        assert _main("judge", str(b), str(a), "--seed", "4", "--out", str(out_rev)) == EXIT_OK
        fwd = json.loads(out_fwd.read_text())["summary"]
        rev = json.loads(out_rev.read_text())["summary"]
        assert fwd["wins_a"] == rev["wins_b"]
        assert fwd["wins_b"] == rev["wins_a"]
        assert fwd["ties"] == rev["ties"]

    def test_config_without_judge_seat_fails(self, tmp_path, capsys):
        manifest = tmp_path / "run.ini"
        manifest.write_text(
            "[backend.m]\nkind = mock\n\n"
            "[agent.c1]\nrole = collaborative\nbackend = m\nmodel = x\n\n"
            "[agent.c2]\nrole = collaborative\nbackend = m\nmodel = y\n\n"
            "[agent.summary]\nrole = summary\nbackend = m\nmodel = z\n\n"
            "[agent.residual]\nrole = residual\nbackend = m\nmodel = z\n",
            encoding="utf-8",
        )
        a = self._answers(tmp_path, "a.jsonl", [{"id": "q", "output": "x", "instruction": "Ask."}])
        b = self._answers(tmp_path, "b.jsonl", [{"id": "q", "output": "y"}])
        assert _main("judge", str(a), str(b), "--config", str(manifest)) == EXIT_USAGE
        assert "judge seat" in capsys.readouterr().err


class TestReport:
    def test_empty_directory_is_fine(self, tmp_path, capsys):
        empty = tmp_path / "empty"
        empty.mkdir()
        assert _main("report", str(empty)) == EXIT_OK
        assert (empty / "report.json").exists()

    def test_report_over_run_outputs(self, tmp_path, capsys):
        outdir = tmp_path / "runs"
        outdir.mkdir()
        _main("run", "--query", "Q.", "--agents-n", "2", "--out", str(outdir / "one.json"), *FAST)
        _main("run", "--query", "Q.", "--agents-n", "2", "--layers", "2", "--out", str(outdir / "two.json"), *FAST)
        capsys.readouterr()
        assert _main("report", str(outdir), "--outdir", str(tmp_path / "rep")) == EXIT_OK
        text = capsys.readouterr().out
        assert "per-depth totals:" in text
        assert (tmp_path / "rep" / "depth.csv").read_text().count("\n") == 3


class TestSweep:
    def test_sweep_writes_grid(self, tmp_path, capsys):
        outdir = tmp_path / "sweep"
        code = _main(
            "sweep", "--agents-n", "2", "--layers", "1", "2", "--attention", "pairwise",
            "--outdir", str(outdir), "--mean-tokens", "40", "--std-tokens", "8",
        )
        assert code == EXIT_OK
        names = sorted(p.name for p in outdir.glob("n*.json"))
        assert names == ["n2_l1_pairwise_es0.json", "n2_l2_pairwise_es0.json"]
        assert (outdir / "report.json").exists()

    def test_sweep_es_axis(self, tmp_path):
        outdir = tmp_path / "sweep"
        code = _main(
            "sweep", "--agents-n", "2", "--layers", "2", "--attention", "singlepass",
            "--early-stop", "off", "on", "--outdir", str(outdir),
            "--mean-tokens", "40", "--std-tokens", "8",
        )
        assert code == EXIT_OK
        assert (outdir / "n2_l2_singlepass_es0.json").exists()
        assert (outdir / "n2_l2_singlepass_es1.json").exists()


class TestEntryPoint:
    def test_module_invocation(self, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "attnmoa.cli", "run", "--query", "Name a bird.",
             "--agents-n", "2", "--mean-tokens", "40", "--std-tokens", "8"],
            capture_output=True, text=True, timeout=120,
        )
        assert proc.returncode == EXIT_OK
        assert proc.stdout.strip()

    def test_help_mentions_subcommands(self):
        proc = subprocess.run(
            [sys.executable, "-m", "attnmoa.cli", "--help"],
            capture_output=True, text=True, timeout=120,
        )
        assert proc.returncode == 0
        for name in ("run", "dataset", "judge", "report", "sweep"):
            assert name in proc.stdout
