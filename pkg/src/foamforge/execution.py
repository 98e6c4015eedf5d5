"""Solver execution backends and the log-to-error-record extraction."""

from __future__ import annotations

import os
import re
import shutil
import subprocess
import threading
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Callable, Iterable, Literal, Mapping

from pydantic import BaseModel, Field

from .errors import ExecutionDisabled, ScriptExhausted, SpawnFailure, Timeout, UnknownJob
from .models import ErrorRecord

REAL_EXEC_ENV = "FOAMFORGE_REAL_EXEC"
TAIL_LINES = 50

_FATAL = re.compile(r"-->\s*FOAM FATAL (?:IO )?ERROR")
_WARNING = re.compile(r"-->\s*FOAM Warning")
_FATAL_END = re.compile(r"FOAM (?:parallel run )?(?:exiting|aborting)")
_FILE_LINE = re.compile(r"^\s*file:\s*(\S+)\s+(?:from|at)\s+line\s+(\d+)")


class ExecutionResult(BaseModel):
    status: Literal["success", "failure"]
    logs: dict[str, str] = Field(default_factory=dict)
    exit_codes: dict[str, int] = Field(default_factory=dict)


def success(logs: Mapping[str, str] | None = None, exit_codes: Mapping[str, int] | None = None) -> ExecutionResult:
    return ExecutionResult(status="success", logs=dict(logs or {}), exit_codes=dict(exit_codes or {}))


def failure(logs: Mapping[str, str], exit_codes: Mapping[str, int] | None = None) -> ExecutionResult:
    return ExecutionResult(status="failure", logs=dict(logs), exit_codes=dict(exit_codes or {}))


def _block_record(log_name: str, lines: list[str], severity: str) -> ErrorRecord:
    while lines and not lines[-1]:
        lines.pop()
    location = log_name
    for line in lines:
        m = _FILE_LINE.match(line)
        if m:
            location = f"{log_name}: {m.group(1)} line {m.group(2)}"
            break
    return ErrorRecord(message="\n".join(lines), location=location, severity=severity)


def _scan_log(name: str, text: str) -> list[ErrorRecord]:
    records: list[ErrorRecord] = []
    lines = [ln.rstrip() for ln in text.splitlines()]
    i = 0
    while i < len(lines):
        line = lines[i]
        if _FATAL.search(line):
            block = [line]
            i += 1
            while i < len(lines):
                block.append(lines[i])
                i += 1
                if _FATAL_END.search(block[-1]):
                    break
            records.append(_block_record(name, block, "fatal"))
            continue
        if _WARNING.search(line):
            block = [line]
            i += 1
            while i < len(lines) and lines[i] and not _FATAL.search(lines[i]) and not _WARNING.search(lines[i]):
                block.append(lines[i])
                i += 1
            records.append(_block_record(name, block, "warning"))
            continue
        i += 1
    return records


def _log_for(command: str, logs: Mapping[str, str]) -> str | None:
    for key in (f"log.{command}", command):
        if key in logs:
            return key
    return None


def extract_errors(logs: Mapping[str, str], exit_codes: Mapping[str, int] | None = None) -> list[ErrorRecord]:
    """Map captured logs to error records.

    Fatal blocks run from a ``--> FOAM FATAL [IO ]ERROR`` line through the
    ``FOAM exiting`` (or ``aborting``) line; warning blocks run from
    ``--> FOAM Warning`` to the next blank line or marker. Records follow log
    order, then line order. When no fatal block exists anywhere, each command
    with a nonzero exit code contributes one synthetic fatal record holding
    the last 50 lines of its log.
    """
    records: list[ErrorRecord] = []
    for name, text in logs.items():
        records.extend(_scan_log(name, text))
    if any(r.severity == "fatal" for r in records):
        return records
    for command, code in (exit_codes or {}).items():
        if code == 0:
            continue
        key = _log_for(command, logs)
        if key is None:
            records.append(ErrorRecord(
                message=f"{command} exited with code {code} and left no log",
                location=command,
                severity="fatal",
            ))
            continue
        tail = [ln.rstrip() for ln in logs[key].splitlines()][-TAIL_LINES:]
        records.append(ErrorRecord(message="\n".join(tail), location=key, severity="fatal"))
    return records


def derive_status(logs: Mapping[str, str], exit_codes: Mapping[str, int]) -> str:
    fatal = any(r.severity == "fatal" for r in extract_errors(logs, exit_codes))
    return "failure" if fatal or any(exit_codes.values()) else "success"


class Executor(ABC):
    """Runs a materialized case directory."""

    @abstractmethod
    def prepare(self, case_dir: Path) -> None:
        """Remove artifacts of earlier runs and set up log capture."""

    @abstractmethod
    def run(self, case_dir: Path) -> ExecutionResult:
        """Execute the case's Allrun script."""

    @abstractmethod
    def run_script(self, case_dir: Path, script_name: str, outputs: Iterable[str] = ()) -> ExecutionResult:
        """Execute a Python helper script (plotting, mesh generation) in *case_dir*."""


class FakeExecutor(Executor):
    """Replays scripted results and records every invocation.

    *runs* feeds :meth:`run`; *scripts* feeds :meth:`run_script`. A
    successful scripted helper run writes placeholder files for the
    requested *outputs* so callers can check for them as they would after a
    real run.
    """

    def __init__(self, runs: Iterable[ExecutionResult] = (), scripts: Iterable[ExecutionResult] = ()) -> None:
        self._runs = list(runs)
        self._scripts = list(scripts)
        self._lock = threading.Lock()
        self.invocations: list[str] = []

    def prepare(self, case_dir: Path) -> None:
        with self._lock:
            self.invocations.append("prepare")

    def run(self, case_dir: Path) -> ExecutionResult:
        with self._lock:
            self.invocations.append("run")
            if not self._runs:
                raise ScriptExhausted("fake executor has no scripted run left")
            return self._runs.pop(0)

    def run_script(self, case_dir: Path, script_name: str, outputs: Iterable[str] = ()) -> ExecutionResult:
        with self._lock:
            self.invocations.append(f"script:{script_name}")
            if not self._scripts:
                raise ScriptExhausted("fake executor has no scripted helper run left")
            result = self._scripts.pop(0)
        if result.status == "success":
            for name in outputs:
                target = Path(case_dir) / name
                target.parent.mkdir(parents=True, exist_ok=True)
                target.write_bytes(b"\x89PNG\r\n\x1a\n")
        return result

    @property
    def remaining(self) -> int:
        return len(self._runs)


def real_execution_enabled() -> bool:
    return os.environ.get(REAL_EXEC_ENV) == "1"


class LocalExecutor(Executor):
    """Runs ``Allrun`` with the local OpenFOAM install.

    Only active when ``FOAMFORGE_REAL_EXEC=1``; otherwise every run raises
    ExecutionDisabled.
    """

    def __init__(self, shell: str = "bash", timeout: float = 600.0, python: str = "python3") -> None:
        self.shell = shell
        self.timeout = timeout
        self.python = python

    def _check(self) -> None:
        if not real_execution_enabled():
            raise ExecutionDisabled(f"set {REAL_EXEC_ENV}=1 to run OpenFOAM locally")

    def prepare(self, case_dir: Path) -> None:
        case_dir = Path(case_dir)
        for path in case_dir.glob("log.*"):
            path.unlink()
        for path in case_dir.glob("processor*"):
            shutil.rmtree(path, ignore_errors=True)
        for path in case_dir.iterdir():
            if path.is_dir() and path.name != "0" and _is_time_dir(path.name):
                shutil.rmtree(path, ignore_errors=True)
        shutil.rmtree(case_dir / "constant" / "polyMesh", ignore_errors=True)
        (case_dir / "logs").mkdir(exist_ok=True)

    def _spawn(self, case_dir: Path, argv: list[str], name: str) -> tuple[int, str]:
        self._check()
        try:
            proc = subprocess.run(
                argv, cwd=case_dir, capture_output=True, text=True, timeout=self.timeout,
            )
        except subprocess.TimeoutExpired as exc:
            raise Timeout(self.timeout, _collect_logs(case_dir)) from exc
        except OSError as exc:
            raise SpawnFailure(f"could not start {name}: {exc}") from exc
        return proc.returncode, proc.stdout + proc.stderr

    def run(self, case_dir: Path) -> ExecutionResult:
        case_dir = Path(case_dir)
        code, output = self._spawn(case_dir, [self.shell, "./Allrun"], "Allrun")
        logs = _collect_logs(case_dir)
        logs["log.Allrun"] = output
        exit_codes = {"Allrun": code}
        return ExecutionResult(status=derive_status(logs, exit_codes), logs=logs, exit_codes=exit_codes)

    def run_script(self, case_dir: Path, script_name: str, outputs: Iterable[str] = ()) -> ExecutionResult:
        case_dir = Path(case_dir)
        code, output = self._spawn(case_dir, [self.python, script_name], script_name)
        key = f"log.{script_name}"
        return ExecutionResult(
            status="success" if code == 0 else "failure",
            logs={key: output},
            exit_codes={script_name: code},
        )


def _is_time_dir(name: str) -> bool:
    try:
        float(name)
    except ValueError:
        return False
    return True


def _collect_logs(case_dir: Path) -> dict[str, str]:
    return {
        p.name: p.read_text("utf-8", errors="replace")
        for p in sorted(Path(case_dir).glob("log.*")) if p.is_file()
    }


# HPC submission

JobState = Literal["pending", "running", "completed", "failed"]


class Submitter(ABC):
    @abstractmethod
    def submit(self, script_text: str, case_dir: Path | None = None) -> str: ...

    @abstractmethod
    def status(self, job_id: str) -> JobState: ...


class StubSubmitter(Submitter):
    """In-memory scheduler.

    Each poll reports the job's current state and then moves it
    *advance_per_poll* steps along pending -> running -> completed (or
    failed when *fail* is set).
    """

    def __init__(self, advance_per_poll: int = 1, fail: bool = False) -> None:
        self.advance_per_poll = advance_per_poll
        self.fail = fail
        self._steps: dict[str, int] = {}
        self.scripts: dict[str, str] = {}
        self._counter = 0
        self._lock = threading.Lock()

    def _states(self) -> tuple[JobState, ...]:
        return ("pending", "running", "failed" if self.fail else "completed")

    def submit(self, script_text: str, case_dir: Path | None = None) -> str:
        with self._lock:
            self._counter += 1
            job_id = str(10000 + self._counter)
            self._steps[job_id] = 0
            self.scripts[job_id] = script_text
        return job_id

    def status(self, job_id: str) -> JobState:
        with self._lock:
            if job_id not in self._steps:
                raise UnknownJob(job_id)
            states = self._states()
            step = self._steps[job_id]
            self._steps[job_id] = min(step + self.advance_per_poll, len(states) - 1)
            return states[step]


CommandRunner = Callable[[list[str], Path | None], str]

_SUBMITTED = re.compile(r"Submitted batch job (\d+)")
_SQUEUE_STATES: dict[str, JobState] = {
    "PENDING": "pending", "CONFIGURING": "running", "RUNNING": "running", "COMPLETING": "running",
}


def parse_sbatch_output(text: str) -> str:
    m = _SUBMITTED.search(text)
    if not m:
        raise SpawnFailure(f"unexpected sbatch output: {text.strip()!r}")
    return m.group(1)


def _run_command(argv: list[str], cwd: Path | None) -> str:
    try:
        proc = subprocess.run(argv, cwd=cwd, capture_output=True, text=True, check=True)
    except (OSError, subprocess.CalledProcessError) as exc:
        raise SpawnFailure(f"{argv[0]} failed: {exc}") from exc
    return proc.stdout


class SlurmSubmitter(Submitter):
    """Shell adapter over ``sbatch`` / ``squeue`` / ``sacct``."""

    def __init__(self, runner: CommandRunner = _run_command, script_name: str = "job.slurm") -> None:
        self.runner = runner
        self.script_name = script_name

    def submit(self, script_text: str, case_dir: Path | None = None) -> str:
        cwd = Path(case_dir) if case_dir else None
        if cwd is not None:
            (cwd / self.script_name).write_text(script_text, encoding="utf-8")
        return parse_sbatch_output(self.runner(["sbatch", self.script_name], cwd))

    def status(self, job_id: str) -> JobState:
        state = self.runner(["squeue", "-h", "-j", job_id, "-o", "%T"], None).strip().upper()
        if state:
            return _SQUEUE_STATES.get(state.split()[0], "running")
        final = self.runner(["sacct", "-n", "-X", "-j", job_id, "-o", "State"], None).strip().upper()
        if not final:
            raise UnknownJob(job_id)
        return "completed" if final.split()[0] == "COMPLETED" else "failed"


def hpc_submit(script_text: str, submitter: Submitter, case_dir: Path | None = None) -> str:
    return submitter.submit(script_text, case_dir)


def hpc_status(job_id: str, submitter: Submitter) -> JobState:
    return submitter.status(job_id)
