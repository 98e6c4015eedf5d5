"""Offline ablation harness: scripted scenarios run across the configuration toggle matrix."""

from __future__ import annotations

import csv
import io
import itertools
import json
import os
import re
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .execution import ExecutionResult, FakeExecutor, failure, success
from .knowledge import KnowledgeIndex
from .llm import CompletionRequest, CompletionResult, HashEmbedder, Provider, count_tokens
from .models import CaseState, Config
from .workflow import WorkflowEngine, counter_clock, default_knowledge

CAVITY_REQUIREMENT = (
    "Do an incompressible lid driven cavity flow using icoFoam solver. The cavity is a square of "
    "side 0.1 m meshed with 20x20x1 cells. The top wall ('movingWall') moves in the x-direction with "
    "a uniform velocity of 1 m/s. The 'fixedWalls' have a no-slip boundary condition and 'frontAndBack' "
    "is empty. The simulation runs from time 0 to 0.5 with a time step of 0.005 units. "
    "The viscosity (nu) is set as constant with a value of 0.01 m^2/s."
)
CAVITY_SUBTASKS = (
    ("controlDict", "system"), ("fvSchemes", "system"), ("fvSolution", "system"),
    ("blockMeshDict", "system"), ("transportProperties", "constant"), ("U", "0"), ("p", "0"),
)


class Scenario(BaseModel):
    """One scripted case: what the model answers and how the fake run behaves."""

    model_config = ConfigDict(extra="forbid")

    name: str
    requirement: str = CAVITY_REQUIREMENT
    attachments: list[str] = Field(default_factory=list)
    descriptor: dict[str, str] = Field(default_factory=lambda: {
        "case_name": "cavity", "case_domain": "incompressible",
        "case_category": "laminar", "case_solver": "icoFoam",
    })
    subtasks: list[tuple[str, str]] = Field(default_factory=lambda: list(CAVITY_SUBTASKS))
    failures: int = Field(0, ge=0)
    failures_without_dependency: int | None = Field(None, ge=0)
    visualization_failures: int = Field(0, ge=0)

    def run_failures(self, file_dependency: bool) -> int:
        if not file_dependency and self.failures_without_dependency is not None:
            return self.failures_without_dependency
        return self.failures


class Suite(BaseModel):
    model_config = ConfigDict(extra="forbid")

    cases: list[Scenario] = Field(min_length=1)
    max_loops: int = Field(10, gt=0)


def load_suite(path: str | os.PathLike) -> Suite:
    return Suite.model_validate_json(Path(path).read_text("utf-8"))


FATAL_LOG = """\
Create time

--> FOAM FATAL IO ERROR:
keyword div(phi,U) is undefined in dictionary "system/fvSchemes/divSchemes"

file: system/fvSchemes/divSchemes from line 25 to line 28.

    From function const Foam::entry& Foam::dictionary::lookupEntry(const Foam::word&, bool, bool) const
    in file db/dictionary/dictionary.C at line 566.

FOAM exiting
"""


def failed_run(solver: str = "icoFoam") -> ExecutionResult:
    return failure({"log.blockMesh": "End\n", f"log.{solver}": FATAL_LOG}, {"blockMesh": 0, solver: 1})


def passed_run(solver: str = "icoFoam") -> ExecutionResult:
    return success({"log.blockMesh": "End\n", f"log.{solver}": "Time = 0.5\n\nEnd\n"}, {"blockMesh": 0, solver: 0})


def _generic_dictionary(name: str) -> str:
    return (
        "FoamFile\n{\n    format      ascii;\n    class       dictionary;\n"
        f"    object      {name};\n}}\n"
    )


_TAG = re.compile(r"<(file_name|folder_name)>(.*?)</\1>")
_SIMILAR = re.compile(r"<similar_case_reference>(.*?)</similar_case_reference>", re.S)
_WRAPPED = re.compile(r"<similar_file [^>]*>\n(.*?)\n</similar_file>", re.S)
_FILE = re.compile(r'<file path="([^"]+)">\n(.*?)\n</file>', re.S)


class ScenarioProvider(Provider):
    """Rule-based stand-in for a language model, keyed on the request's template id.

    File generation echoes the reference file found in the prompt (or a
    minimal header when none is given); file correction rewrites
    ``system/controlDict`` with a revision marker so each repair changes a
    file.
    """

    def __init__(self, scenario: Scenario, embedding_dim: int = 1536) -> None:
        self.scenario = scenario
        self.embedding_dim = embedding_dim
        self._embedder = HashEmbedder(embedding_dim)
        self.requests: list[CompletionRequest] = []
        self.corrections = 0

    def embed(self, text: str) -> np.ndarray:
        return self._embedder(text)

    def _answer(self, req: CompletionRequest) -> str:
        tid = req.template_id
        sc = self.scenario
        if tid == "case_description":
            return json.dumps(sc.descriptor)
        if tid == "task_decomposition":
            return json.dumps({"subtasks": [{"file_name": f, "folder_name": d} for f, d in sc.subtasks]})
        if tid == "file_generation":
            tags = dict(_TAG.findall(req.system_prompt))
            ref = _SIMILAR.search(req.user_prompt)
            text = ref.group(1).strip() if ref else ""
            wrapped = _WRAPPED.search(text)
            if wrapped:
                text = wrapped.group(1)
            return text or _generic_dictionary(tags.get("file_name", "dictionary"))
        if tid == "command_generation":
            return f"blockMesh\n{sc.descriptor['case_solver']}"
        if tid == "allrun_generation":
            solver = sc.descriptor["case_solver"]
            return ("```bash\n#!/bin/sh\ncd \"${0%/*}\" || exit 1\n. ${WM_PROJECT_DIR:?}/bin/tools/RunFunctions\n"
                    f"runApplication blockMesh\nrunApplication {solver}\n```")
        if tid in ("error_analysis_initial", "error_analysis_subsequent"):
            return "The divergence scheme for div(phi,U) is missing; define it in fvSchemes."
        if tid == "file_correction":
            self.corrections += 1
            files = dict(_FILE.findall(req.user_prompt))
            key = "system/controlDict" if "system/controlDict" in files else next(iter(files), "system/controlDict")
            folder, _, name = key.rpartition("/")
            content = files.get(key, _generic_dictionary(name)).rstrip("\n")
            content = re.sub(r"\n// revision \d+$", "", content) + f"\n// revision {self.corrections}\n"
            return json.dumps([{"file_name": name, "folder_name": folder, "content": content}])
        if tid == "mesh_gmsh_script":
            return "```python\nimport gmsh\ngmsh.initialize()\ngmsh.write('mesh.msh')\n```"
        if tid in ("visualization_script", "visualization_correction"):
            return "```python\nimport pyvista as pv\n```"
        raise ValueError(f"scenario provider has no rule for template {tid!r}")

    def complete(self, request: CompletionRequest) -> CompletionResult:
        self.requests.append(request)
        text = self._answer(request)
        return CompletionResult(
            text,
            prompt_tokens=count_tokens(request.system_prompt) + count_tokens(request.user_prompt),
            completion_tokens=count_tokens(text),
        )


def scenario_executor(scenario: Scenario, file_dependency: bool = True) -> FakeExecutor:
    solver = scenario.descriptor.get("case_solver", "icoFoam")
    k = scenario.run_failures(file_dependency)
    runs = [failed_run(solver) for _ in range(k)] + [passed_run(solver)]
    scripts = [failure({"log.visualize.py": "ModuleNotFoundError: No module named 'pyvista'\n"},
                       {"visualize.py": 1}) for _ in range(scenario.visualization_failures)]
    scripts.append(success({"log.visualize.py": ""}, {"visualize.py": 0}))
    return FakeExecutor(runs, scripts)


@dataclass(frozen=True)
class CaseOutcome:
    name: str
    success: bool
    token_usage: int
    loop_count: int


@dataclass(frozen=True)
class RowSummary:
    reviewer: bool
    file_dependency: bool
    retrieval_mode: str
    outcomes: tuple[CaseOutcome, ...]

    @property
    def success_rate(self) -> float:
        return 100.0 * sum(o.success for o in self.outcomes) / len(self.outcomes)

    @property
    def mean_tokens(self) -> float:
        return sum(o.token_usage for o in self.outcomes) / len(self.outcomes)

    @property
    def avg_loops(self) -> float:
        return sum(o.loop_count for o in self.outcomes) / len(self.outcomes)


def run_case(scenario: Scenario, config: Config, workdir: Path, knowledge: KnowledgeIndex) -> CaseState:
    provider = ScenarioProvider(scenario, config.embedding_dim)
    executor = scenario_executor(scenario, config.file_dependency_enabled)
    engine = WorkflowEngine(provider, executor, workdir, config, knowledge, clock=counter_clock())
    return engine.run(scenario.requirement, scenario.attachments, case_id=scenario.name)


def run_bench(
    suite: Suite,
    retrieval_modes: Iterable[str] = ("hierarchy",),
    jobs: int = 1,
    workdir: str | os.PathLike | None = None,
    base_config: Config | None = None,
) -> list[RowSummary]:
    """Run every scenario under every toggle combination, rows in matrix order."""
    base = base_config or Config(max_loops=suite.max_loops)
    embedder_provider = ScenarioProvider(suite.cases[0], base.embedding_dim)
    knowledge = default_knowledge(embedder_provider, base)
    rows = []
    with tempfile.TemporaryDirectory(prefix="foamforge-bench-") as tmp:
        root = Path(workdir) if workdir else Path(tmp)
        for reviewer, dependency, mode in itertools.product((True, False), (True, False), tuple(retrieval_modes)):
            config = base.model_copy(update={
                "reviewer_enabled": reviewer, "file_dependency_enabled": dependency, "retrieval_mode": mode,
            })
            row_dir = root / f"reviewer-{int(reviewer)}_dependency-{int(dependency)}_{mode}"

            def one(sc: Scenario, config=config, row_dir=row_dir) -> CaseOutcome:
                state = run_case(sc, config, row_dir, knowledge)
                return CaseOutcome(sc.name, state.run_status == "success", state.token_usage, state.loop_count)

            if jobs > 1:
                with ThreadPoolExecutor(max_workers=jobs) as pool:
                    outcomes = tuple(pool.map(one, suite.cases))
            else:
                outcomes = tuple(one(sc) for sc in suite.cases)
            rows.append(RowSummary(reviewer, dependency, mode, outcomes))
    return rows


CSV_COLUMNS = ("reviewer", "file_dependency", "retrieval_mode", "cases",
               "success_rate", "token_usage", "avg_reviewer_loops")


def to_csv(rows: Iterable[RowSummary]) -> str:
    """Summary table; the loop column reads N/A for rows without the reviewer."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in rows:
        writer.writerow([
            "on" if r.reviewer else "off",
            "on" if r.file_dependency else "off",
            r.retrieval_mode,
            len(r.outcomes),
            f"{r.success_rate:.1f}",
            f"{r.mean_tokens:.1f}",
            f"{r.avg_loops:.2f}" if r.reviewer else "N/A",
        ])
    return buf.getvalue()
