"""Domain records passed between agents, plus plan ordering and case persistence."""

from __future__ import annotations

import heapq
import json
import os
import shutil
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError, CyclicDependency, DescriptorError, UnknownVocabularyTerm

ROOT_FOLDER = ""
FOLDER_RANK = {"system": 0, "constant": 1, "0": 2}
AUX_RANK = 3


def normalize_folder(folder: str | None) -> str:
    """Map the spellings of the case root (None, ".", "./") onto ``""``."""
    if folder is None:
        return ROOT_FOLDER
    folder = folder.strip().strip("/")
    if folder in (".", "./"):
        return ROOT_FOLDER
    if folder.startswith("./"):
        folder = folder[2:]
    return folder


def folder_rank(folder: str) -> int:
    top = folder.split("/", 1)[0]
    return FOLDER_RANK.get(top, AUX_RANK)


def file_key(folder: str, file_name: str) -> str:
    return f"{folder}/{file_name}" if folder else file_name


class CaseDescriptor(BaseModel):
    model_config = ConfigDict(frozen=True)

    case_name: str
    case_domain: str
    case_category: str
    case_solver: str


@dataclass(frozen=True)
class VocabularySets:
    domains: frozenset[str]
    categories: frozenset[str]
    solvers: frozenset[str]

    @classmethod
    def from_mapping(cls, data: dict) -> VocabularySets:
        return cls(
            domains=frozenset(data["case_domain"]),
            categories=frozenset(data["case_category"]),
            solvers=frozenset(data["case_solver"]),
        )

    @classmethod
    def load(cls, path: str | os.PathLike | None = None) -> VocabularySets:
        """Load vocabularies from *path*, or the set bundled with the package."""
        if path is None:
            text = resources.files("foamforge").joinpath("data/vocab.json").read_text("utf-8")
        else:
            text = Path(path).read_text("utf-8")
        return cls.from_mapping(json.loads(text))

    def as_prompt_lists(self) -> dict[str, str]:
        return {
            "case_domains": str(sorted(self.domains)),
            "case_categories": str(sorted(self.categories)),
            "case_solvers": str(sorted(self.solvers)),
        }


def validate_descriptor(raw: CaseDescriptor, vocab: VocabularySets) -> CaseDescriptor:
    if not (vocab.domains and vocab.categories and vocab.solvers):
        raise DescriptorError("vocabulary sets must be nonempty")
    name = raw.case_name.strip()
    if not name:
        raise DescriptorError("case_name is empty")
    if "/" in name or "\\" in name or name in (".", ".."):
        raise DescriptorError(f"case_name {name!r} is not filesystem-safe")
    for field, allowed in (
        ("case_domain", vocab.domains),
        ("case_category", vocab.categories),
        ("case_solver", vocab.solvers),
    ):
        value = getattr(raw, field)
        if value not in allowed:
            raise UnknownVocabularyTerm(field, value)
    return raw.model_copy(update={"case_name": name})


class PlannedFile(BaseModel):
    model_config = ConfigDict(frozen=True)

    file_name: str
    folder_name: str = ROOT_FOLDER
    dependencies: tuple[str, ...] = ()
    priority: int = 0

    @field_validator("folder_name", mode="before")
    @classmethod
    def _normalize_folder(cls, v):
        return normalize_folder(v)

    @property
    def key(self) -> str:
        return file_key(self.folder_name, self.file_name)


class SimulationPlan(BaseModel):
    model_config = ConfigDict(frozen=True)

    files: tuple[PlannedFile, ...] = ()
    source_reference: str = ""

    @model_validator(mode="after")
    def _check_references(self):
        keys = [f.key for f in self.files]
        if len(set(keys)) != len(keys):
            dupes = sorted({k for k in keys if keys.count(k) > 1})
            raise ValueError(f"duplicate planned files: {dupes}")
        known = set(keys)
        for f in self.files:
            missing = [d for d in f.dependencies if d not in known]
            if missing:
                raise ValueError(f"{f.key} depends on files outside the plan: {missing}")
        return self

    def keys(self) -> list[str]:
        return [f.key for f in self.files]


def _find_cycle(files: tuple[PlannedFile, ...]) -> list[str] | None:
    deps = {f.key: f.dependencies for f in files}
    color: dict[str, int] = {}
    stack: list[str] = []

    def visit(node: str) -> list[str] | None:
        color[node] = 1
        stack.append(node)
        for nxt in deps[node]:
            if color.get(nxt) == 1:
                return stack[stack.index(nxt):] + [nxt]
            if nxt not in color:
                found = visit(nxt)
                if found:
                    return found
        stack.pop()
        color[node] = 2
        return None

    for f in files:
        if f.key not in color:
            found = visit(f.key)
            if found:
                return found
    return None


def generation_order(plan: SimulationPlan, file_dependency_enabled: bool = True) -> list[PlannedFile]:
    """Order planned files for generation.

    With dependencies enabled the result is the topological order that is
    lexicographically smallest under ``(folder rank, plan index)``: system
    before constant before 0 before root-level files, plan order within a
    folder, and every dependency ahead of its dependents. With dependencies
    disabled the plan order is returned unchanged.
    """
    files = plan.files
    if not file_dependency_enabled:
        return list(files)
    cycle = _find_cycle(files)
    if cycle:
        raise CyclicDependency(cycle)

    index = {f.key: i for i, f in enumerate(files)}
    pending = {f.key: len(set(f.dependencies)) for f in files}
    dependents: dict[str, list[str]] = {f.key: [] for f in files}
    for f in files:
        for d in set(f.dependencies):
            dependents[d].append(f.key)

    heap = [(folder_rank(f.folder_name), index[f.key]) for f in files if pending[f.key] == 0]
    heapq.heapify(heap)
    order: list[PlannedFile] = []
    while heap:
        _, i = heapq.heappop(heap)
        f = files[i]
        order.append(f)
        for child in dependents[f.key]:
            pending[child] -= 1
            if pending[child] == 0:
                c = files[index[child]]
                heapq.heappush(heap, (folder_rank(c.folder_name), index[child]))
    return order


class FoamFile(BaseModel):
    model_config = ConfigDict(frozen=True)

    file_name: str
    folder_name: str = ROOT_FOLDER
    content: str = Field(min_length=1)
    executable: bool = False

    @field_validator("folder_name", mode="before")
    @classmethod
    def _normalize_folder(cls, v):
        return normalize_folder(v)

    @property
    def key(self) -> str:
        return file_key(self.folder_name, self.file_name)


class ErrorRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    message: str
    location: str
    severity: Literal["fatal", "warning"]


class AttemptRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    attempt_number: int = Field(gt=0)
    file_snapshot: tuple[FoamFile, ...] = ()
    error_logs: str = ""
    review_analysis: str = ""
    fatal_count: int = 0


class MeshSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    mode: Literal["native", "external_msh", "external_dicts", "gmsh_script"] = "native"
    source_path: str | None = None
    boundary_names: tuple[str, ...] = ()
    attachments: tuple[str, ...] = ()


class Config(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    max_loops: int = Field(10, gt=0)
    reviewer_enabled: bool = True
    file_dependency_enabled: bool = True
    temperature: float = Field(0.0, ge=0.0, le=1.0)
    retrieval_mode: Literal["hierarchy", "single_index"] = "hierarchy"
    top_k: int = Field(5, gt=0)
    embedding_dim: int = Field(1536, gt=0)
    relevance_threshold: float = Field(0.2, ge=-1.0, le=1.0)
    visualization_max_attempts: int = Field(3, gt=0)
    visualization_backend: Literal["pyvista", "paraview"] = "pyvista"
    run_timeout: float = Field(600.0, gt=0)


def make_config(**values) -> Config:
    """Build a :class:`Config`, converting validation failures to ConfigError."""
    try:
        return Config(**values)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


class CaseState(BaseModel):
    """Mutable record of one case; only the workflow engine writes to it."""

    model_config = ConfigDict(validate_assignment=False)

    case_id: str
    user_requirement: str
    attachments: list[str] = Field(default_factory=list)
    descriptor: CaseDescriptor | None = None
    plan: SimulationPlan | None = None
    mesh: MeshSpec | None = None
    mesh_commands: list[str] = Field(default_factory=list)
    foamfiles: list[FoamFile] = Field(default_factory=list)
    artifacts: dict[str, str] = Field(default_factory=dict)
    tutorial_reference: str = ""
    execution_logs: str = ""
    logs: dict[str, str] = Field(default_factory=dict)
    error_records: list[ErrorRecord] = Field(default_factory=list)
    lint_findings: list[str] = Field(default_factory=list)
    run_status: Literal["not_run", "success", "failure"] = "not_run"
    history: list[AttemptRecord] = Field(default_factory=list)
    loop_count: int = Field(0, ge=0)
    token_usage: int = Field(0, ge=0)
    prompt_tokens: int = Field(0, ge=0)
    completion_tokens: int = Field(0, ge=0)
    visualization_outputs: list[str] = Field(default_factory=list)
    hpc_script: str = ""
    errors: list[str] = Field(default_factory=list)

    def file(self, folder: str, file_name: str) -> FoamFile | None:
        key = file_key(normalize_folder(folder), file_name)
        for f in self.foamfiles:
            if f.key == key:
                return f
        return None

    def error_log_text(self) -> str:
        return format_error_records(self.error_records)


def format_error_records(records: list[ErrorRecord]) -> str:
    return "\n\n".join(f"[{r.severity}] {r.location}\n{r.message}" for r in records)


def case_dir(workdir: str | os.PathLike, case_id: str) -> Path:
    return Path(workdir) / case_id


def save_state(state: CaseState, workdir: str | os.PathLike) -> Path:
    path = case_dir(workdir, state.case_id) / "state.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(state.model_dump_json(indent=2), encoding="utf-8")
    os.replace(tmp, path)
    return path


def load_state(workdir: str | os.PathLike, case_id: str) -> CaseState:
    path = case_dir(workdir, case_id) / "state.json"
    return CaseState.model_validate_json(path.read_text("utf-8"))


def materialize(state: CaseState, workdir: str | os.PathLike) -> Path:
    """Write every FoamFile, text artifact and attached ``.msh`` under ``<workdir>/<case_id>/case``."""
    root = case_dir(workdir, state.case_id) / "case"
    root.mkdir(parents=True, exist_ok=True)
    for f in state.foamfiles:
        target = root / f.folder_name / f.file_name if f.folder_name else root / f.file_name
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(f.content, encoding="utf-8")
        if f.executable:
            target.chmod(0o755)
    for name, text in state.artifacts.items():
        target = root / name
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(text, encoding="utf-8")
    for attachment in state.attachments:
        src = Path(attachment)
        if src.is_file() and src.suffix.lower() == ".msh":
            shutil.copyfile(src, root / src.name)
    return root
