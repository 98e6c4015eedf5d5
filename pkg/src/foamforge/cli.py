"""Command line entry point: ``foamforge run|index|serve|bench``.

Exit codes: 0 success, 1 simulation failure, 2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

from pydantic import ValidationError

from . import bench, mcp
from .errors import FoamForgeError
from .execution import Executor, LocalExecutor, real_execution_enabled
from .knowledge import IndexSet, KnowledgeIndex, build_index_set, ingest_corpus
from .llm import HashEmbedder, Provider, provider_from_settings
from .models import Config
from .workflow import WorkflowEngine

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
SETTINGS_ENV = "FOAMFORGE_SETTINGS"
WORKDIR_ENV = "FOAMFORGE_WORKDIR"

log = logging.getLogger("foamforge")


class UsageError(Exception):
    pass


def default_settings_path() -> Path:
    env = os.environ.get(SETTINGS_ENV)
    if env:
        return Path(env)
    return Path.home() / ".config" / "foamforge" / "settings.json"


def load_settings(path: str | os.PathLike | None) -> dict:
    """Settings JSON: ``{"provider": {...}, "config": {...}, "workdir": ...}``.

    An explicit path must exist; the conventional path is optional.
    """
    p = Path(path) if path else default_settings_path()
    if not p.is_file():
        if path:
            raise UsageError(f"settings file not found: {p}")
        return {}
    try:
        data = json.loads(p.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"settings file {p} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"settings file {p} must hold a JSON object")
    return data


# flags mirror Config fields one to one
_BOOL_FIELDS = ("reviewer_enabled", "file_dependency_enabled")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration (overrides the settings file)")
    for name, field in Config.model_fields.items():
        flag = "--" + name.replace("_", "-")
        if name in _BOOL_FIELDS:
            g.add_argument(flag, dest=name, action=argparse.BooleanOptionalAction, default=None)
        elif name in ("retrieval_mode", "visualization_backend"):
            choices = list(field.annotation.__args__)
            g.add_argument(flag, dest=name, choices=choices, default=None)
        else:
            g.add_argument(flag, dest=name, type=field.annotation, default=None)


def build_config(args: argparse.Namespace, settings: dict) -> Config:
    values: dict[str, Any] = dict(settings.get("config") or {})
    for name in Config.model_fields:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    try:
        return Config(**values)
    except ValidationError as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def _scenario(path: str) -> bench.Scenario:
    try:
        return bench.Scenario.model_validate_json(Path(path).read_text("utf-8"))
    except (OSError, ValidationError) as exc:
        raise UsageError(f"cannot load scenario {path}: {exc}") from exc


def _provider(args: argparse.Namespace, settings: dict, config: Config) -> Provider:
    if getattr(args, "scenario", None):
        return bench.ScenarioProvider(_scenario(args.scenario), config.embedding_dim)
    if "provider" not in settings:
        raise UsageError("no language model configured: add a 'provider' section to the settings file "
                         "or pass --scenario for an offline run")
    return provider_from_settings(settings["provider"])


def _executor_factory(args: argparse.Namespace, config: Config) -> Callable[[], Executor]:
    if real_execution_enabled():
        return lambda: LocalExecutor(timeout=config.run_timeout)
    if getattr(args, "scenario", None):
        shared = bench.scenario_executor(_scenario(args.scenario), config.file_dependency_enabled)
        return lambda: shared
    raise UsageError("real execution is disabled; set FOAMFORGE_REAL_EXEC=1 or pass --scenario")


def _knowledge(args: argparse.Namespace, provider: Provider, config: Config) -> KnowledgeIndex | None:
    if not getattr(args, "index", None):
        return None
    try:
        index_set = IndexSet.load(args.index)
    except (OSError, KeyError, ValueError) as exc:
        raise UsageError(f"cannot load index {args.index}: {exc}") from exc
    if index_set.embedding_dim != config.embedding_dim:
        raise UsageError(f"index dimension {index_set.embedding_dim} differs from "
                         f"embedding_dim {config.embedding_dim}")
    return KnowledgeIndex(provider.embed, index_set, config.top_k, config.relevance_threshold)


def _workdir(args: argparse.Namespace, settings: dict) -> Path:
    return Path(args.workdir or os.environ.get(WORKDIR_ENV) or settings.get("workdir") or "runs")


# commands


def cmd_run(args: argparse.Namespace) -> int:
    settings = load_settings(args.settings)
    config = build_config(args, settings)
    if args.prompt_file:
        try:
            requirement = Path(args.prompt_file).read_text("utf-8").strip()
        except OSError as exc:
            raise UsageError(f"cannot read prompt file: {exc}") from exc
    else:
        requirement = (args.prompt or "").strip()
    if not requirement:
        raise UsageError("give the requirement inline or with --prompt-file")
    for a in args.attach:
        if not Path(a).is_file():
            raise UsageError(f"attachment not found: {a}")
    provider = _provider(args, settings, config)
    executor = _executor_factory(args, config)()
    engine = WorkflowEngine(provider, executor, _workdir(args, settings), config,
                            _knowledge(args, provider, config))
    state = engine.run(requirement, args.attach, case_id=args.case_id)
    print(f"case_id: {state.case_id}")
    print(f"status: {state.run_status}")
    print(f"loop_count: {state.loop_count}")
    print(f"token_usage: {state.token_usage}")
    for e in state.errors:
        print(f"error: {e}")
    return EXIT_OK if state.run_status == "success" else EXIT_FAILURE


def cmd_index(args: argparse.Namespace) -> int:
    settings = load_settings(args.settings)
    config = build_config(args, settings)
    if args.embedder == "provider":
        embed = _provider(args, settings, config).embed
    else:
        embed = HashEmbedder(config.embedding_dim)
    try:
        records = ingest_corpus(args.corpus_root)
    except (OSError, FoamForgeError) as exc:
        raise UsageError(f"cannot ingest corpus: {exc}") from exc
    index_set = build_index_set(records, embed, config.embedding_dim)
    out = index_set.save(args.output)
    counts = ", ".join(f"{k}={len(v)}" for k, v in index_set.indices.items())
    print(f"indexed {len(records)} cases into {out} ({counts})")
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    settings = load_settings(args.settings)
    config = build_config(args, settings)
    provider = _provider(args, settings, config)
    factory = _executor_factory(args, config)
    service = mcp.FoamForgeService(
        _workdir(args, settings), provider, factory, config=config,
        knowledge=_knowledge(args, provider, config),
        jobs=mcp.JobStore(args.job_mode, max_workers=args.workers),
    )
    try:
        mcp.serve(service, sys.stdin.buffer, sys.stdout.buffer)
    finally:
        service.jobs.shutdown()
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    try:
        suite = bench.load_suite(args.suite)
    except (OSError, ValidationError) as exc:
        raise UsageError(f"cannot load suite {args.suite}: {exc}") from exc
    settings = load_settings(args.settings)
    base = build_config(args, settings)
    if args.max_loops is None:
        base = base.model_copy(update={"max_loops": suite.max_loops})
    modes = [m.strip() for m in args.retrieval_modes.split(",") if m.strip()]
    bad = [m for m in modes if m not in ("hierarchy", "single_index")]
    if bad or not modes:
        raise UsageError(f"unknown retrieval modes: {bad or modes}")
    if args.jobs < 1:
        raise UsageError("--jobs must be at least 1")
    rows = bench.run_bench(suite, modes, jobs=args.jobs, base_config=base)
    text = bench.to_csv(rows)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="foamforge", description="Natural-language OpenFOAM case generation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--settings", help="settings JSON (default: $FOAMFORGE_SETTINGS or "
                                          "~/.config/foamforge/settings.json)")
        _add_config_flags(p)

    run = sub.add_parser("run", help="generate, run and repair one case")
    run.add_argument("prompt", nargs="?", help="requirement text")
    run.add_argument("--prompt-file")
    run.add_argument("--attach", action="append", default=[], help="attachment file (repeatable)")
    run.add_argument("--workdir")
    run.add_argument("--index", help="prebuilt index directory")
    run.add_argument("--case-id")
    run.add_argument("--scenario", help="scripted scenario JSON for an offline run")
    common(run)
    run.set_defaults(func=cmd_run)

    index = sub.add_parser("index", help="knowledge index operations")
    index_sub = index.add_subparsers(dest="index_command", required=True)
    build = index_sub.add_parser("build", help="ingest a tutorial corpus and write the index set")
    build.add_argument("corpus_root")
    build.add_argument("-o", "--output", required=True)
    build.add_argument("--embedder", choices=("hash", "provider"), default="hash")
    common(build)
    build.set_defaults(func=cmd_index)

    serve = sub.add_parser("serve", help="tool service over stdio JSON-RPC")
    serve.add_argument("--workdir")
    serve.add_argument("--index")
    serve.add_argument("--scenario")
    serve.add_argument("--job-mode", choices=("thread", "poll"), default="thread")
    serve.add_argument("--workers", type=int, default=4)
    common(serve)
    serve.set_defaults(func=cmd_serve)

    b = sub.add_parser("bench", help="ablation matrix over a scripted suite")
    b.add_argument("suite")
    b.add_argument("-o", "--output")
    b.add_argument("--retrieval-modes", default="hierarchy")
    b.add_argument("--jobs", type=int, default=1)
    common(b)
    b.set_defaults(func=cmd_bench)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"foamforge: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
