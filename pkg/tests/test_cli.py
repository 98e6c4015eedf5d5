from __future__ import annotations

import io
import json
import os
import subprocess
import sys

import pytest

from foamforge import cli
from foamforge.knowledge import IndexSet
from foamforge.mcp import encode_frame, read_frame

from conftest import FIXTURES
from synthetic import write_corpus

SCENARIO = FIXTURES / "bench" / "scenario_cavity.json"


@pytest.fixture(autouse=True)
def isolated(tmp_path, monkeypatch):
    settings = tmp_path / "settings.json"
    settings.write_text("{}")
    monkeypatch.setenv(cli.SETTINGS_ENV, str(settings))
    monkeypatch.delenv("FOAMFORGE_REAL_EXEC", raising=False)
    monkeypatch.delenv(cli.WORKDIR_ENV, raising=False)
    return settings


def test_no_provider_is_usage_error(tmp_path, capsys):
    assert cli.main(["run", "a cavity", "--workdir", str(tmp_path)]) == cli.EXIT_USAGE
    assert "no language model configured" in capsys.readouterr().err


def test_bad_flag_is_usage_error():
    assert cli.main(["run", "--no-such-flag"]) == cli.EXIT_USAGE
    assert cli.main([]) == cli.EXIT_USAGE


def test_missing_explicit_settings(tmp_path):
    assert cli.main(["run", "x", "--settings", str(tmp_path / "nope.json"), "--scenario", str(SCENARIO)]) == 2


def test_empty_requirement(tmp_path):
    assert cli.main(["run", "  ", "--scenario", str(SCENARIO), "--workdir", str(tmp_path)]) == 2


def test_run_success(tmp_path, capsys):
    code = cli.main(["run", "lid-driven cavity", "--scenario", str(SCENARIO),
                     "--workdir", str(tmp_path), "--case-id", "c1"])
    out = capsys.readouterr().out
    assert code == cli.EXIT_OK and "status: success" in out and "loop_count: 1" in out
    for name in ("state.json", "trace.ndjson", "case", "logs"):
        assert (tmp_path / "c1" / name).exists()


def test_run_failure_without_reviewer(tmp_path, capsys):
    code = cli.main(["run", "lid-driven cavity", "--scenario", str(SCENARIO), "--workdir", str(tmp_path),
                     "--case-id", "c1", "--no-reviewer-enabled"])
    assert code == cli.EXIT_FAILURE and "status: failure" in capsys.readouterr().out


def test_prompt_file_and_missing_attachment(tmp_path):
    prompt = tmp_path / "req.txt"
    prompt.write_text("cavity\n")
    args = ["run", "--prompt-file", str(prompt), "--scenario", str(SCENARIO), "--workdir", str(tmp_path)]
    assert cli.main(args + ["--attach", str(tmp_path / "absent.msh")]) == cli.EXIT_USAGE
    assert cli.main(args) == cli.EXIT_OK


def test_settings_config_and_flag_override(tmp_path, isolated):
    isolated.write_text(json.dumps({"config": {"max_loops": 3}}))
    args = cli.build_parser().parse_args(["run", "x", "--max-loops", "5"])
    assert cli.build_config(args, cli.load_settings(None)).max_loops == 5
    args = cli.build_parser().parse_args(["run", "x"])
    assert cli.build_config(args, cli.load_settings(None)).max_loops == 3


def test_index_build(tmp_path, capsys):
    corpus = write_corpus(tmp_path / "corpus", 6)
    out = tmp_path / "idx"
    assert cli.main(["index", "build", str(corpus), "-o", str(out)]) == cli.EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest and list(out.glob("*.f64"))
    loaded = IndexSet.load(out)
    assert set(loaded.indices) == {"tutorial_structure", "tutorial_details", "execution_scripts",
                                   "command_documentation"}
    assert "indexed 6 cases" in capsys.readouterr().out


def test_run_with_built_index(tmp_path):
    corpus = write_corpus(tmp_path / "corpus", 6)
    assert cli.main(["index", "build", str(corpus), "-o", str(tmp_path / "idx")]) == 0
    code = cli.main(["run", "cavity", "--scenario", str(SCENARIO), "--workdir", str(tmp_path / "w"),
                     "--index", str(tmp_path / "idx")])
    assert code == cli.EXIT_OK


def test_index_bad_corpus(tmp_path):
    assert cli.main(["index", "build", str(tmp_path / "absent"), "-o", str(tmp_path / "o")]) == cli.EXIT_USAGE


def test_bench_csv(tmp_path):
    out = tmp_path / "bench.csv"
    suite = FIXTURES / "bench" / "repair_suite.json"
    assert cli.main(["bench", str(suite), "-o", str(out), "--retrieval-modes", "hierarchy,single_index"]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "reviewer,file_dependency,retrieval_mode,cases,success_rate,token_usage,avg_reviewer_loops"
    assert len(lines) == 9
    assert cli.main(["bench", str(suite), "--retrieval-modes", "flat"]) == cli.EXIT_USAGE
    assert cli.main(["bench", str(suite), "--jobs", "0"]) == cli.EXIT_USAGE


def test_serve_subprocess(tmp_path, isolated):
    proc = subprocess.run(
        [sys.executable, "-m", "foamforge", "serve", "--scenario", str(SCENARIO), "--workdir", str(tmp_path)],
        input=encode_frame({"jsonrpc": "2.0", "id": 1, "method": "tools/list"}),
        capture_output=True, timeout=60, env={**os.environ, cli.SETTINGS_ENV: str(isolated)})
    assert proc.returncode == 0
    reply = json.loads(read_frame(io.BytesIO(proc.stdout)))
    assert len(reply["result"]["tools"]) == 11
