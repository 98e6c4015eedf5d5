"""Tool-protocol service: the engine's capabilities as atomic tools over stdio JSON-RPC 2.0."""

from __future__ import annotations

import json
import logging
import os
import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, BinaryIO, Callable, Generator, Iterable, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from . import agents
from .errors import FoamForgeError, UnknownCase, UnknownJob, UnknownTool
from .execution import Executor, StubSubmitter, Submitter, extract_errors
from .knowledge import KnowledgeIndex
from .llm import LLMGateway, Provider
from .models import (
    AttemptRecord,
    CaseState,
    Config,
    FoamFile,
    MeshSpec,
    case_dir,
    format_error_records,
    load_state,
    materialize,
    save_state,
)
from .prompts import PromptLibrary, default_library
from .workflow import default_knowledge

log = logging.getLogger(__name__)

PROTOCOL_VERSION = "2024-11-05"
SERVER_INFO = {"name": "foamforge", "version": "0.1.0"}

# JSON-RPC error codes
PARSE_ERROR = -32700
INVALID_REQUEST = -32600
METHOD_NOT_FOUND = -32601
INVALID_PARAMS = -32602
APPLICATION_ERROR = -32000


# tool schemas


class _In(BaseModel):
    model_config = ConfigDict(extra="forbid")


class _Out(BaseModel):
    model_config = ConfigDict(extra="forbid")


class CreateCaseIn(_In):
    user_prompt: str = Field(min_length=1)
    attachments: list[str] = Field(default_factory=list)


class CreateCaseOut(_Out):
    case_id: str


class CaseIn(_In):
    case_id: str


class PlanEntry(_Out):
    file: str
    folder: str


class PlanOut(_Out):
    plan: list[PlanEntry]


class GenerateFileIn(_In):
    case_id: str
    file: str
    folder: str


class GenerateFileOut(_Out):
    content: str


class MeshConfig(_In):
    mode: Literal["native", "external_msh", "external_dicts", "gmsh_script"] | None = None
    source_path: str | None = None
    boundary_names: list[str] | None = None


class GenerateMeshIn(_In):
    case_id: str
    mesh_config: MeshConfig = Field(default_factory=MeshConfig)


class JobOut(_Out):
    job_id: str


class GenerateHpcIn(_In):
    case_id: str
    hpc_config: agents.HPCConfig


class GenerateHpcOut(_Out):
    script_content: str


class RunSimulationIn(_In):
    case_id: str
    environment: Literal["local", "hpc"] = "local"


class CheckJobIn(_In):
    job_id: str


class JobStatus(_Out):
    job_id: str
    kind: Literal["mesh", "simulation", "visualization"]
    case_id: str
    state: Literal["pending", "running", "succeeded", "failed"]
    result_summary: dict[str, Any] = Field(default_factory=dict)


class CheckJobOut(_Out):
    status: JobStatus


class LogsIn(_In):
    case_id: str
    job_id: str


class LogsOut(_Out):
    logs: dict[str, str]


class ReviewIn(_In):
    case_id: str
    logs: dict[str, str] | None = None


class Modification(BaseModel):
    model_config = ConfigDict(extra="forbid")

    file: str = Field(min_length=1)
    folder: str
    content: str = Field(min_length=1)


class Suggestions(_Out):
    analysis: str
    modifications: list[Modification]


class ReviewOut(_Out):
    suggestions: Suggestions


class ApplyFixIn(_In):
    case_id: str
    modifications: list[Modification]


class ApplyFixOut(_Out):
    status: Literal["applied"]
    changed: list[str]


class VisualizationIn(_In):
    case_id: str
    quantity: str = Field(min_length=1)
    plane: str | None = None
    time: Literal["latest"] | float | None = None
    output_name: str | None = None


@dataclass(frozen=True)
class ToolDescriptor:
    name: str
    input_model: type[BaseModel]
    output_model: type[BaseModel]
    documentation: str
    asynchronous: bool = False

    @property
    def input_schema(self) -> dict:
        return self.input_model.model_json_schema()

    @property
    def output_schema(self) -> dict:
        return self.output_model.model_json_schema()

    def wire(self) -> dict:
        return {
            "name": self.name,
            "description": self.documentation,
            "inputSchema": self.input_schema,
            "outputSchema": self.output_schema,
        }


def register_tools() -> list[ToolDescriptor]:
    return [
        ToolDescriptor("create_case", CreateCaseIn, CreateCaseOut,
                       "Initialize a new simulation case and its workspace."),
        ToolDescriptor("plan_simulation_structure", CaseIn, PlanOut,
                       "Classify the requirement, retrieve a reference case and list the files to write."),
        ToolDescriptor("generate_file_content", GenerateFileIn, GenerateFileOut,
                       "Write one planned file, using the files already written as context. "
                       "file='Allrun' with folder='' writes the run script."),
        ToolDescriptor("generate_mesh", GenerateMeshIn, JobOut,
                       "Asynchronously prepare the mesh. mesh_config: {mode?, source_path?, boundary_names?}; "
                       "omitted fields are inferred from the requirement and attachments.", True),
        ToolDescriptor("generate_hpc_script", GenerateHpcIn, GenerateHpcOut,
                       "Write a Slurm batch script. hpc_config: {cluster_name, account, nodes, tasks, walltime, "
                       "partition_hints, memory, job_name, case_path}; also writes a matching decomposeParDict."),
        ToolDescriptor("run_simulation", RunSimulationIn, JobOut,
                       "Asynchronously run the case locally or through the HPC scheduler.", True),
        ToolDescriptor("check_job_status", CheckJobIn, CheckJobOut,
                       "Report the state of a mesh, simulation or visualization job."),
        ToolDescriptor("get_simulation_logs", LogsIn, LogsOut,
                       "Return the log files captured by a job."),
        ToolDescriptor("review_and_suggest_fix", ReviewIn, ReviewOut,
                       "Analyse a failed run and propose corrected files without applying them."),
        ToolDescriptor("apply_fix", ApplyFixIn, ApplyFixOut,
                       "Replace or add case files."),
        ToolDescriptor("generate_visualization", VisualizationIn, JobOut,
                       "Asynchronously render a quantity to an image in the case directory. "
                       "time is 'latest' or a number.", True),
    ]


# job store

JobWork = Generator[str, None, tuple[str, dict]]
_TRANSITIONS = {
    "pending": {"pending", "running", "succeeded", "failed"},
    "running": {"running", "succeeded", "failed"},
    "succeeded": set(),
    "failed": set(),
}


@dataclass
class JobRecord:
    job_id: str
    kind: Literal["mesh", "simulation", "visualization"]
    case_id: str
    status: str = "pending"
    result_summary: dict[str, Any] | None = None
    logs: dict[str, str] | None = None

    def snapshot(self) -> JobRecord:
        return JobRecord(self.job_id, self.kind, self.case_id, self.status,
                         dict(self.result_summary or {}), dict(self.logs or {}))


class JobStore:
    """Job registry with two worker modes.

    ``poll`` advances a job one step per :meth:`advance` call, which makes
    job progress a deterministic function of status polls. ``thread`` runs
    each job to completion on a bounded pool as soon as it is enqueued.
    Work is a generator yielding intermediate states (``pending`` or
    ``running``) and returning ``(final_state, result_summary)``.
    """

    def __init__(self, mode: Literal["poll", "thread"] = "poll", max_workers: int = 4,
                 id_factory: Callable[[], str] | None = None) -> None:
        self.mode = mode
        self._jobs: dict[str, JobRecord] = {}
        self._work: dict[str, JobWork] = {}
        self._lock = threading.RLock()
        self._pool = ThreadPoolExecutor(max_workers=max_workers) if mode == "thread" else None
        self._new_id = id_factory or (lambda: f"job-{uuid.uuid4().hex[:12]}")

    def enqueue(self, kind: str, case_id: str, work: JobWork) -> JobRecord:
        with self._lock:
            job = JobRecord(self._new_id(), kind, case_id)
            self._jobs[job.job_id] = job
            self._work[job.job_id] = work
            snap = job.snapshot()
        if self._pool is not None:
            self._pool.submit(self._run_all, job.job_id)
        return snap

    def _set(self, job: JobRecord, status: str) -> None:
        if status not in _TRANSITIONS[job.status]:
            raise ValueError(f"job {job.job_id}: illegal transition {job.status} -> {status}")
        if job.status == "pending" and status in ("succeeded", "failed"):
            job.status = "running"
        job.status = status

    def _step(self, job_id: str) -> bool:
        """Advance one step; True once the job is terminal."""
        with self._lock:
            job = self._jobs[job_id]
            work = self._work.get(job_id)
        if work is None:
            return True
        try:
            state = next(work)
        except StopIteration as stop:
            final, summary = stop.value
            with self._lock:
                self._set(job, final)
                job.result_summary = summary
                job.logs = summary.pop("_logs", {}) if isinstance(summary, dict) else {}
                self._work.pop(job_id, None)
            return True
        except Exception as exc:  # a crashing job fails, never the store
            log.warning("job %s crashed: %s", job_id, exc)
            with self._lock:
                self._set(job, "failed")
                job.result_summary = {"error": f"{type(exc).__name__}: {exc}"}
                job.logs = getattr(exc, "logs", {}) or {}
                self._work.pop(job_id, None)
            return True
        with self._lock:
            if state in _TRANSITIONS[job.status]:
                self._set(job, state)
                return False
            log.warning("job %s reported %s while %s", job_id, state, job.status)
            job.result_summary = {"error": f"illegal transition {job.status} -> {state}"}
            job.status = "failed"
            job.logs = {}
            self._work.pop(job_id, None)
        return True

    def _run_all(self, job_id: str) -> None:
        while not self._step(job_id):
            pass

    def advance(self, job_id: str) -> JobRecord:
        """Report the job, then (in poll mode) move it one step forward.

        Reporting before stepping makes a polled local job read pending,
        running, then its terminal state, the same rule the scheduler stub
        follows.
        """
        snap = self.get(job_id)
        if self.mode == "poll":
            self._step(job_id)
        return snap

    def get(self, job_id: str) -> JobRecord:
        with self._lock:
            if job_id not in self._jobs:
                raise UnknownJob(job_id)
            return self._jobs[job_id].snapshot()

    def list(self, case_id: str | None = None) -> list[JobRecord]:
        with self._lock:
            return [j.snapshot() for j in self._jobs.values() if case_id is None or j.case_id == case_id]

    def shutdown(self) -> None:
        if self._pool is not None:
            self._pool.shutdown(wait=True)


# service


class ToolError(FoamForgeError):
    def __init__(self, code: int, message: str, data: dict | None = None) -> None:
        super().__init__(message)
        self.code = code
        self.data = data or {}


class FoamForgeService:
    """Case-keyed tool implementations sharing one workspace root.

    Each call works on a copy of the stored case state and commits it only
    when the call succeeds, so a failed call leaves the case untouched
    apart from the error note it records.
    """

    def __init__(
        self,
        workdir: str | os.PathLike,
        provider: Provider,
        executor_factory: Callable[[], Executor],
        submitter: Submitter | None = None,
        config: Config | None = None,
        knowledge: KnowledgeIndex | None = None,
        library: PromptLibrary | None = None,
        jobs: JobStore | None = None,
        case_id_factory: Callable[[], str] | None = None,
    ) -> None:
        self.workdir = Path(workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.provider = provider
        self.executor_factory = executor_factory
        self.submitter = submitter or StubSubmitter()
        self.config = config or Config()
        self.knowledge = knowledge or default_knowledge(provider, self.config)
        self.library = library or default_library()
        self.jobs = jobs or JobStore()
        self.tools = {t.name: t for t in register_tools()}
        self._new_case_id = case_id_factory or (lambda: f"case-{uuid.uuid4().hex[:12]}")
        self._cases: dict[str, CaseState] = {}
        self._case_locks: dict[str, threading.Lock] = {}
        self._lock = threading.Lock()
        self.gateway = LLMGateway(provider, self.config.temperature)

    # state helpers

    def _kit(self) -> agents.AgentKit:
        return agents.AgentKit(self.gateway, self.knowledge, self.config, self.library)

    def _case_lock(self, case_id: str) -> threading.Lock:
        with self._lock:
            return self._case_locks.setdefault(case_id, threading.Lock())

    def load(self, case_id: str) -> CaseState:
        with self._lock:
            cached = self._cases.get(case_id)
        if cached is not None:
            return cached.model_copy(deep=True)
        if not (case_dir(self.workdir, case_id) / "state.json").is_file():
            raise UnknownCase(case_id)
        state = load_state(self.workdir, case_id)
        with self._lock:
            self._cases[case_id] = state
        return state.model_copy(deep=True)

    def commit(self, state: CaseState) -> None:
        state.token_usage = state.prompt_tokens + state.completion_tokens
        with self._lock:
            self._cases[state.case_id] = state.model_copy(deep=True)
        save_state(state, self.workdir)

    def _metered(self, state: CaseState, fn: Callable[[], Any]) -> Any:
        before = (self.gateway.prompt_tokens, self.gateway.completion_tokens)
        try:
            return fn()
        finally:
            state.prompt_tokens += self.gateway.prompt_tokens - before[0]
            state.completion_tokens += self.gateway.completion_tokens - before[1]

    def _note_error(self, case_id: str, message: str) -> None:
        try:
            with self._case_lock(case_id):
                state = self.load(case_id)
                state.errors.append(message)
                self.commit(state)
        except UnknownCase:
            pass

    # dispatch

    def call(self, name: str, arguments: Any) -> dict:
        tool = self.tools.get(name)
        if tool is None:
            raise UnknownTool(name)
        try:
            args = tool.input_model.model_validate(arguments if arguments is not None else {})
        except ValidationError as exc:
            raise ToolError(INVALID_PARAMS, "arguments do not match the input schema",
                            {"type": "SchemaViolation", "errors": _errors(exc)}) from exc
        handler = getattr(self, f"tool_{name}")
        case_id = getattr(args, "case_id", None)
        try:
            if case_id is not None:
                with self._case_lock(case_id):
                    result = handler(args)
            else:
                result = handler(args)
        except (UnknownCase, UnknownJob, UnknownTool):
            raise
        except (FoamForgeError, ValueError, OSError) as exc:
            if case_id is not None:
                self._note_error(case_id, f"{name}: {type(exc).__name__}: {exc}")
            raise ToolError(APPLICATION_ERROR, str(exc), {"type": type(exc).__name__}) from exc
        try:
            return tool.output_model.model_validate(result).model_dump(mode="json")
        except ValidationError as exc:
            raise ToolError(APPLICATION_ERROR, f"{name} produced an invalid result",
                            {"type": "SchemaViolation", "errors": _errors(exc)}) from exc

    # tools

    def tool_create_case(self, args: CreateCaseIn) -> dict:
        state = CaseState(case_id=self._new_case_id(), user_requirement=args.user_prompt,
                          attachments=list(args.attachments))
        (case_dir(self.workdir, state.case_id) / "case").mkdir(parents=True, exist_ok=True)
        self.commit(state)
        return {"case_id": state.case_id}

    def tool_plan_simulation_structure(self, args: CaseIn) -> dict:
        state = self.load(args.case_id)
        kit = self._kit()
        descriptor, plan, retrieved = self._metered(state, lambda: agents.architect_plan(state, kit))
        state.descriptor, state.plan = descriptor, plan
        state.tutorial_reference = retrieved.formatted_context
        spec = agents.select_mesh_mode(state.user_requirement, state.attachments)
        if spec.mode != "gmsh_script":
            mesh = agents.prepare_mesh(state, spec)
            state.plan, state.mesh_commands = mesh.plan, list(mesh.commands)
            state.foamfiles.extend(f for f in mesh.files if state.file(f.folder_name, f.file_name) is None)
        state.mesh = spec
        self.commit(state)
        return {"plan": [{"file": f.file_name, "folder": f.folder_name} for f in state.plan.files]}

    def tool_generate_file_content(self, args: GenerateFileIn) -> dict:
        state = self.load(args.case_id)
        if state.plan is None:
            raise agents.EmptyPlan("plan the case before generating files")
        kit = self._kit()
        key = FoamFile(file_name=args.file, folder_name=args.folder, content="-").key
        if key == agents.ALLRUN:
            others = [f for f in state.foamfiles if f.key != key]
            new = self._metered(state, lambda: agents.generate_allrun(state, others, kit,
                                                                       state.plan.source_reference))
        else:
            planned = next((p for p in state.plan.files if p.key == key), None)
            if planned is None:
                raise ValueError(f"{key} is not part of the plan")
            order = [p.key for p in state.plan.files]
            written = sorted((f for f in state.foamfiles if f.key != key and f.key != agents.ALLRUN),
                             key=lambda f: order.index(f.key) if f.key in order else len(order))
            new = self._metered(state, lambda: agents.generate_file(state, planned, written, kit,
                                                                     state.plan.source_reference))
        state = agents.apply_modifications(state, [new])
        boundary = state.mesh.boundary_names if state.mesh else ()
        state.lint_findings = agents.lint_messages(state.foamfiles, state.descriptor, boundary)
        self.commit(state)
        return {"content": new.content}

    def tool_generate_mesh(self, args: GenerateMeshIn) -> dict:
        state = self.load(args.case_id)
        if state.plan is None:
            raise agents.EmptyPlan("plan the case before meshing")
        inferred = agents.select_mesh_mode(state.user_requirement, state.attachments)
        cfg = args.mesh_config
        spec = MeshSpec(
            mode=cfg.mode or inferred.mode,
            source_path=cfg.source_path or inferred.source_path,
            boundary_names=tuple(cfg.boundary_names) if cfg.boundary_names is not None else inferred.boundary_names,
            attachments=inferred.attachments,
        )
        case_id = state.case_id

        def work() -> JobWork:
            yield "running"
            with self._case_lock(case_id):
                current = self.load(case_id)
                mesh = self._metered(current, lambda: agents.prepare_mesh(current, spec, self._kit()))
                current.mesh, current.plan = spec, mesh.plan
                current.mesh_commands = list(mesh.commands)
                for f in mesh.files:
                    current = agents.apply_modifications(current, [f])
                current.artifacts.update(mesh.artifacts)
                self.commit(current)
            return "succeeded", {"mode": spec.mode, "commands": list(mesh.commands),
                                 "artifacts": sorted(mesh.artifacts)}

        return {"job_id": self.jobs.enqueue("mesh", case_id, work()).job_id}

    def tool_generate_hpc_script(self, args: GenerateHpcIn) -> dict:
        state = self.load(args.case_id)
        script = agents.generate_hpc_script(state, args.hpc_config)
        state = agents.apply_modifications(state, agents.hpc_case_files(state, args.hpc_config))
        state.hpc_script = script
        root = case_dir(self.workdir, state.case_id)
        (root / "job.slurm").write_text(script, encoding="utf-8")
        self.commit(state)
        return {"script_content": script}

    def _finish_run(self, case_id: str, logs: dict[str, str], exit_codes: dict[str, int],
                    status: str) -> tuple[str, dict]:
        with self._case_lock(case_id):
            state = self.load(case_id)
            records = extract_errors(logs, exit_codes)
            fatal = [r for r in records if r.severity == "fatal"]
            ok = status == "success" and not fatal
            state.logs, state.error_records = dict(logs), records
            state.execution_logs = format_error_records(fatal)
            state.run_status = "success" if ok else "failure"
            if not ok:
                state.history.append(AttemptRecord(
                    attempt_number=len(state.history) + 1, file_snapshot=tuple(state.foamfiles),
                    error_logs=state.execution_logs, fatal_count=len(fatal),
                ))
            logs_dir = case_dir(self.workdir, case_id) / "logs"
            logs_dir.mkdir(parents=True, exist_ok=True)
            for name, text in logs.items():
                (logs_dir / name).write_text(text, encoding="utf-8")
            self.commit(state)
        summary = {"run_status": state.run_status, "fatal_errors": len(fatal),
                   "warnings": len(records) - len(fatal), "_logs": dict(logs)}
        return ("succeeded" if ok else "failed"), summary

    def tool_run_simulation(self, args: RunSimulationIn) -> dict:
        state = self.load(args.case_id)
        if not state.foamfiles:
            raise ValueError("the case has no files to run")
        if args.environment == "hpc" and not state.hpc_script:
            raise ValueError("generate an HPC script before an hpc run")
        case_id = state.case_id
        case_root = materialize(state, self.workdir)

        def local() -> JobWork:
            yield "running"
            executor = self.executor_factory()
            executor.prepare(case_root)
            result = executor.run(case_root)
            return self._finish_run(case_id, result.logs, result.exit_codes, result.status)

        def hpc() -> JobWork:
            job = self.submitter.submit(state.hpc_script, case_dir(self.workdir, case_id))
            while True:
                phase = self.submitter.status(job)
                if phase in ("completed", "failed"):
                    break
                yield phase
            executor = self.executor_factory()
            executor.prepare(case_root)
            result = executor.run(case_root)
            status = result.status if phase == "completed" else "failure"
            final, summary = self._finish_run(case_id, result.logs, result.exit_codes, status)
            summary["scheduler_job"] = job
            return final, summary

        record = self.jobs.enqueue("simulation", case_id, local() if args.environment == "local" else hpc())
        return {"job_id": record.job_id}

    def tool_check_job_status(self, args: CheckJobIn) -> dict:
        job = self.jobs.advance(args.job_id)
        return {"status": {"job_id": job.job_id, "kind": job.kind, "case_id": job.case_id,
                           "state": job.status, "result_summary": job.result_summary or {}}}

    def tool_get_simulation_logs(self, args: LogsIn) -> dict:
        self.load(args.case_id)
        job = self.jobs.get(args.job_id)
        if job.case_id != args.case_id:
            raise UnknownJob(args.job_id)
        return {"logs": job.logs or {}}

    def tool_review_and_suggest_fix(self, args: ReviewIn) -> dict:
        state = self.load(args.case_id)
        if args.logs is not None:
            records = extract_errors(args.logs)
            fatal = [r for r in records if r.severity == "fatal"]
            state.logs, state.error_records = dict(args.logs), records
            state.execution_logs = format_error_records(fatal or records)
            if fatal:
                state.run_status = "failure"
            if not state.history or state.history[-1].review_analysis:
                state.history.append(AttemptRecord(
                    attempt_number=len(state.history) + 1, file_snapshot=tuple(state.foamfiles),
                    error_logs=state.execution_logs, fatal_count=len(fatal),
                ))
        analysis = self._metered(state, lambda: agents.review(state, self._kit()))
        if state.history:
            state.history[-1] = state.history[-1].model_copy(update={"review_analysis": analysis.analysis_text})
        self.commit(state)
        mods = [{"file": f.file_name, "folder": f.folder_name, "content": f.content}
                for f in analysis.proposed_modifications]
        return {"suggestions": {"analysis": analysis.analysis_text, "modifications": mods}}

    def tool_apply_fix(self, args: ApplyFixIn) -> dict:
        state = self.load(args.case_id)
        mods = [FoamFile(file_name=m.file, folder_name=m.folder, content=m.content,
                         executable=m.file == agents.ALLRUN and m.folder in ("", ".", "./"))
                for m in args.modifications]
        before = {f.key: f.content for f in state.foamfiles}
        state = agents.apply_modifications(state, mods)
        changed = [m.key for m in mods if before.get(m.key) != m.content]
        state.loop_count += 1 if changed and state.run_status == "failure" else 0
        boundary = state.mesh.boundary_names if state.mesh else ()
        state.lint_findings = agents.lint_messages(state.foamfiles, state.descriptor, boundary)
        self.commit(state)
        return {"status": "applied", "changed": changed}

    def tool_generate_visualization(self, args: VisualizationIn) -> dict:
        state = self.load(args.case_id)
        if state.run_status != "success":
            raise agents.ReviewPreconditionError("visualization needs a successful run")
        case_id = state.case_id

        def work() -> JobWork:
            yield "running"
            with self._case_lock(case_id):
                current = self.load(case_id)
                root = case_dir(self.workdir, case_id) / "case"
                outputs, script = self._metered(current, lambda: agents.visualize(
                    current, self._kit(), self.executor_factory(), root,
                    args.quantity, args.plane, args.time, args.output_name))
                current.artifacts[agents.VIS_SCRIPT] = script + "\n"
                current.visualization_outputs = outputs
                self.commit(current)
            return "succeeded", {"outputs": outputs}

        return {"job_id": self.jobs.enqueue("visualization", case_id, work()).job_id}


def _errors(exc: ValidationError) -> list[dict]:
    return [{"loc": [str(p) for p in e["loc"]], "msg": e["msg"]} for e in exc.errors(include_url=False)]


# JSON-RPC


def _error(id_: Any, code: int, message: str, data: dict | None = None) -> dict:
    err: dict[str, Any] = {"code": code, "message": message}
    if data:
        err["data"] = data
    return {"jsonrpc": "2.0", "id": id_, "error": err}


def handle_message(service: FoamForgeService, message: Any) -> dict | None:
    """Dispatch one decoded JSON-RPC message; notifications return None."""
    if not isinstance(message, dict) or message.get("jsonrpc") != "2.0" or not isinstance(message.get("method"), str):
        return _error(message.get("id") if isinstance(message, dict) else None, INVALID_REQUEST, "invalid request")
    is_notification = "id" not in message
    id_ = message.get("id")
    method, params = message["method"], message.get("params") or {}
    try:
        if method == "initialize":
            result: Any = {"protocolVersion": PROTOCOL_VERSION, "capabilities": {"tools": {}},
                           "serverInfo": SERVER_INFO}
        elif method == "tools/list":
            result = {"tools": [t.wire() for t in register_tools()]}
        elif method == "tools/call":
            if not isinstance(params, dict) or not isinstance(params.get("name"), str):
                raise ToolError(INVALID_PARAMS, "tools/call needs a tool name", {"type": "SchemaViolation"})
            structured = service.call(params["name"], params.get("arguments", {}))
            result = {"content": [{"type": "text", "text": json.dumps(structured, sort_keys=True)}],
                      "structuredContent": structured, "isError": False}
        elif method.startswith("notifications/"):
            return None
        else:
            return None if is_notification else _error(id_, METHOD_NOT_FOUND, f"method not found: {method}")
    except ToolError as exc:
        return None if is_notification else _error(id_, exc.code, str(exc), exc.data)
    except (UnknownCase, UnknownJob, UnknownTool) as exc:
        return None if is_notification else _error(id_, APPLICATION_ERROR, str(exc), {"type": type(exc).__name__})
    return None if is_notification else {"jsonrpc": "2.0", "id": id_, "result": result}


def encode_frame(payload: dict) -> bytes:
    body = json.dumps(payload, separators=(",", ":"), sort_keys=True).encode("utf-8")
    return b"Content-Length: " + str(len(body)).encode() + b"\r\n\r\n" + body


def read_frame(stream: BinaryIO) -> bytes | None:
    """Read one Content-Length framed body; None at end of stream."""
    length = None
    while True:
        line = stream.readline()
        if not line:
            return None
        line = line.strip()
        if not line:
            if length is None:
                continue
            break
        name, _, value = line.decode("ascii", errors="replace").partition(":")
        if name.strip().lower() == "content-length":
            length = int(value.strip())
    return stream.read(length)


def serve(service: FoamForgeService, instream: BinaryIO, outstream: BinaryIO) -> None:
    """Answer framed requests from *instream* until it closes."""
    while True:
        body = read_frame(instream)
        if body is None:
            break
        try:
            message = json.loads(body)
        except (json.JSONDecodeError, UnicodeDecodeError):
            response: dict | None = _error(None, PARSE_ERROR, "parse error")
        else:
            response = handle_message(service, message)
        if response is not None:
            outstream.write(encode_frame(response))
            outstream.flush()


def frames(messages: Iterable[dict]) -> bytes:
    return b"".join(encode_frame(m) for m in messages)
