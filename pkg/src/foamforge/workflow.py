"""Stateful graph orchestrator for the generate, run and repair loop, with an ndjson trace."""

from __future__ import annotations

import json
import logging
import os
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Literal

from . import agents
from .errors import FoamForgeError, ScriptExhausted
from .execution import Executor, extract_errors
from .knowledge import KnowledgeIndex, build_index_set, bundled_corpus_root, ingest_corpus
from .llm import LLMGateway, Provider
from .models import (
    AttemptRecord,
    CaseState,
    Config,
    ErrorRecord,
    case_dir,
    format_error_records,
    materialize,
    save_state,
)
from .prompts import PromptLibrary, default_library

log = logging.getLogger(__name__)

NODES = ("architect", "meshing", "input_writer", "runner", "reviewer", "visualization", "end")
EventKind = Literal["entered", "provider_call", "executor_call", "state_delta", "exited"]


def route_next(node: str, run_status: str, loop_count: int, config: Config,
               visualization_requested: bool = False) -> str:
    """Next node after *node* completes.

    The fixed pipeline runs architect, meshing, input_writer, runner. After
    the runner, a success goes to visualization when requested, otherwise
    to end; a failure goes to the reviewer while the reviewer is enabled and
    ``loop_count < max_loops``, otherwise to end. The reviewer always returns
    to the runner.
    """
    if node == "architect":
        return "meshing"
    if node == "meshing":
        return "input_writer"
    if node == "input_writer":
        return "runner"
    if node == "reviewer":
        return "runner"
    if node == "visualization":
        return "end"
    if node == "runner":
        if run_status == "success":
            return "visualization" if visualization_requested else "end"
        if config.reviewer_enabled and loop_count < config.max_loops:
            return "reviewer"
        return "end"
    raise ValueError(f"no route out of node {node!r}")


# trace


@dataclass(frozen=True)
class TraceEvent:
    seq: int
    timestamp: float
    node: str
    event_kind: EventKind
    payload: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "seq": self.seq, "timestamp": self.timestamp, "node": self.node,
            "event_kind": self.event_kind, "payload": self.payload,
        }, sort_keys=True)


class TraceLog:
    """Append-only event sink, mirrored to ndjson when given a path."""

    def __init__(self, path: str | os.PathLike | None = None, clock: Callable[[], float] = time.time) -> None:
        self.path = Path(path) if path else None
        self.clock = clock
        self.events: list[TraceEvent] = []
        self.node = ""
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("", encoding="utf-8")

    def emit(self, event_kind: EventKind, payload: dict | None = None, node: str | None = None) -> TraceEvent:
        event = TraceEvent(len(self.events), self.clock(), node or self.node, event_kind, payload or {})
        self.events.append(event)
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(event.to_json() + "\n")
        return event

    def node_sequence(self) -> list[str]:
        return [e.node for e in self.events if e.event_kind == "entered"]


@dataclass
class Replay:
    nodes: list[str]
    request_hashes: list[str]
    events: list[dict]


def replay_trace(path: str | os.PathLike) -> Replay:
    events = [json.loads(line) for line in Path(path).read_text("utf-8").splitlines() if line.strip()]
    return Replay(
        nodes=[e["node"] for e in events if e["event_kind"] == "entered"],
        request_hashes=[e["payload"]["request_hash"] for e in events if e["event_kind"] == "provider_call"],
        events=events,
    )


# engine


def default_knowledge(provider: Provider, config: Config) -> KnowledgeIndex:
    """Index over the bundled tutorial corpus, embedded with *provider*."""
    records = ingest_corpus(bundled_corpus_root())
    index_set = build_index_set(records, provider.embed, config.embedding_dim)
    return KnowledgeIndex(provider.embed, index_set, config.top_k, config.relevance_threshold)


def counter_clock() -> Callable[[], float]:
    tick = iter(range(1 << 62))
    return lambda: float(next(tick))


def new_case_id() -> str:
    return f"case-{uuid.uuid4().hex[:12]}"


def best_attempt(history: list[AttemptRecord]) -> AttemptRecord | None:
    """Attempt with the fewest fatal errors; the latest wins ties."""
    best = None
    for h in history:
        if best is None or h.fatal_count <= best.fatal_count:
            best = h
    return best


class WorkflowEngine:
    """Runs one case at a time through the agent graph.

    Provider and executor are injected. ``clock`` and ``case_id`` make runs
    reproducible: with a scripted provider, a fake executor and a counter
    clock, two runs give byte-identical states and traces.
    """

    def __init__(
        self,
        provider: Provider,
        executor: Executor,
        workdir: str | os.PathLike,
        config: Config | None = None,
        knowledge: KnowledgeIndex | None = None,
        library: PromptLibrary | None = None,
        clock: Callable[[], float] | None = None,
        vocab=None,
    ) -> None:
        self.provider = provider
        self.executor = executor
        self.workdir = Path(workdir)
        self.config = config or Config()
        self.knowledge = knowledge or default_knowledge(provider, self.config)
        self.library = library or default_library()
        self.clock = clock
        self.vocab = vocab

    def _kit(self, gateway: LLMGateway) -> agents.AgentKit:
        kwargs: dict[str, Any] = {}
        if self.vocab is not None:
            kwargs["vocab"] = self.vocab
        return agents.AgentKit(gateway, self.knowledge, self.config, self.library, **kwargs)

    def run(self, requirement: str, attachments: Iterable[str] = (), case_id: str | None = None) -> CaseState:
        state = CaseState(case_id=case_id or new_case_id(), user_requirement=requirement,
                          attachments=[str(a) for a in attachments])
        root = case_dir(self.workdir, state.case_id)
        root.mkdir(parents=True, exist_ok=True)
        trace = TraceLog(root / "trace.ndjson", self.clock or time.time)
        gateway = LLMGateway(self.provider, self.config.temperature,
                             on_call=lambda info: trace.emit("provider_call", info))
        kit = self._kit(gateway)
        wants_vis = agents.visualization_requested(requirement)

        node = "architect"
        while node != "end":
            trace.node = node
            trace.emit("entered")
            try:
                delta = self._step(node, state, kit, trace, root)
            except (FoamForgeError, ScriptExhausted, OSError, ValueError) as exc:
                log.warning("node %s failed: %s", node, exc)
                state.errors.append(f"{node}: {type(exc).__name__}: {exc}")
                if node != "visualization":
                    state.run_status = "failure"
                trace.emit("state_delta", {"errors": state.errors[-1], "run_status": state.run_status})
                trace.emit("exited", {"next": "end"})
                node = "end"
                break
            if delta:
                trace.emit("state_delta", delta)
            assert state.loop_count <= self.config.max_loops
            nxt = route_next(node, state.run_status, state.loop_count, self.config, wants_vis)
            trace.emit("exited", {"next": nxt})
            node = nxt

        if state.run_status == "failure" and state.history:
            best = best_attempt(state.history)
            if best is not None and list(best.file_snapshot) != state.foamfiles:
                state.foamfiles = list(best.file_snapshot)
                trace.emit("state_delta", {"restored_attempt": best.attempt_number}, node="end")
        state.prompt_tokens = gateway.prompt_tokens
        state.completion_tokens = gateway.completion_tokens
        state.token_usage = gateway.total_tokens
        trace.node = "end"
        trace.emit("entered")
        trace.emit("exited", {"run_status": state.run_status, "loop_count": state.loop_count,
                              "token_usage": state.token_usage})
        save_state(state, self.workdir)
        return state

    # nodes

    def _step(self, node: str, state: CaseState, kit: agents.AgentKit, trace: TraceLog, root: Path) -> dict:
        return getattr(self, f"_node_{node}")(state, kit, trace, root)

    def _node_architect(self, state, kit, trace, root) -> dict:
        descriptor, plan, retrieved = agents.architect_plan(state, kit)
        state.descriptor = descriptor
        state.plan = plan
        state.tutorial_reference = retrieved.formatted_context
        return {"descriptor": descriptor.model_dump(), "plan": plan.keys(),
                "source_reference": plan.source_reference}

    def _node_meshing(self, state, kit, trace, root) -> dict:
        spec = agents.select_mesh_mode(state.user_requirement, state.attachments)
        mesh = agents.prepare_mesh(state, spec, kit)
        state.mesh = spec
        state.plan = mesh.plan
        state.mesh_commands = list(mesh.commands)
        state.foamfiles.extend(mesh.files)
        state.artifacts.update(mesh.artifacts)
        return {"mesh_mode": spec.mode, "mesh_commands": state.mesh_commands, "plan": mesh.plan.keys()}

    def _node_input_writer(self, state, kit, trace, root) -> dict:
        files, findings = agents.write_inputs(state, kit)
        state.foamfiles = files
        state.lint_findings = findings
        return {"files": [f.key for f in files], "lint_findings": findings}

    def _node_runner(self, state, kit, trace, root) -> dict:
        case_root = materialize(state, self.workdir)
        self.executor.prepare(case_root)
        trace.emit("executor_call", {"action": "prepare"})
        result = self.executor.run(case_root)
        trace.emit("executor_call", {"action": "run", "status": result.status,
                                     "exit_codes": result.exit_codes, "logs": sorted(result.logs)})
        logs_dir = root / "logs"
        logs_dir.mkdir(exist_ok=True)
        for name, text in result.logs.items():
            (logs_dir / name).write_text(text, encoding="utf-8")

        records = extract_errors(result.logs, result.exit_codes)
        fatal = [r for r in records if r.severity == "fatal"]
        ok = result.status == "success" and not fatal
        if not ok and not fatal:
            fatal = [ErrorRecord(message="execution reported failure without a recognizable error",
                                 location=next(iter(result.logs), "runner"), severity="fatal")]
            records = records + fatal
        state.logs = dict(result.logs)
        state.error_records = records
        state.execution_logs = format_error_records(fatal)
        state.run_status = "success" if ok else "failure"
        delta: dict[str, Any] = {"run_status": state.run_status, "fatal": len(fatal),
                                 "warnings": len(records) - len(fatal)}
        if not ok:
            state.history.append(AttemptRecord(
                attempt_number=len(state.history) + 1,
                file_snapshot=tuple(state.foamfiles),
                error_logs=state.execution_logs,
                fatal_count=len(fatal),
            ))
            delta["history"] = len(state.history)
        return delta

    def _node_reviewer(self, state, kit, trace, root) -> dict:
        analysis = agents.review(state, kit)
        state.history[-1] = state.history[-1].model_copy(update={"review_analysis": analysis.analysis_text})
        updated = agents.apply_modifications(state, analysis.proposed_modifications)
        state.foamfiles = updated.foamfiles
        boundary = state.mesh.boundary_names if state.mesh else ()
        state.lint_findings = agents.lint_messages(state.foamfiles, state.descriptor, boundary)
        state.loop_count += 1
        return {"loop_count": state.loop_count,
                "modified": [f.key for f in analysis.proposed_modifications],
                "guard_notes": analysis.guard_notes, "lint_findings": state.lint_findings}

    def _node_visualization(self, state, kit, trace, root) -> dict:
        case_root = root / "case"
        outputs, script = agents.visualize(state, kit, self.executor, case_root)
        trace.emit("executor_call", {"action": "run_script", "script": agents.VIS_SCRIPT})
        state.artifacts[agents.VIS_SCRIPT] = script + "\n"
        state.visualization_outputs = outputs
        return {"visualization_outputs": outputs}


def run_workflow(
    requirement: str,
    attachments: Iterable[str] = (),
    config: Config | None = None,
    *,
    provider: Provider,
    executor: Executor,
    workdir: str | os.PathLike,
    knowledge: KnowledgeIndex | None = None,
    clock: Callable[[], float] | None = None,
    case_id: str | None = None,
) -> CaseState:
    engine = WorkflowEngine(provider, executor, workdir, config, knowledge, clock=clock)
    return engine.run(requirement, attachments, case_id)
