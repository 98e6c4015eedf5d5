"""Agent operations over CaseState: planning, meshing, file writing, review, HPC and plotting.

Every provider call goes through a registered template of the prompt
library. Agents return values; the workflow engine decides what to store.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from pydantic import BaseModel, ConfigDict, Field

from .errors import (
    EmptyCorrection,
    EmptyPlan,
    MissingAccount,
    ReviewPreconditionError,
    SchemaViolation,
    VisualizationExhausted,
)
from .execution import Executor
from .foamdict import lint_case
from .knowledge import KnowledgeIndex, RetrievalResult, load_command_docs
from .llm import CaseDescriptionOut, FoamFileBatch, LLMGateway, SubtaskPlan, strip_fences
from .models import (
    AttemptRecord,
    CaseDescriptor,
    CaseState,
    Config,
    FoamFile,
    MeshSpec,
    PlannedFile,
    SimulationPlan,
    VocabularySets,
    file_key,
    generation_order,
    normalize_folder,
    validate_descriptor,
)
from .prompts import PromptLibrary, default_library

ALLRUN = "Allrun"


@dataclass
class AgentKit:
    """Shared collaborators handed to every agent call."""

    gateway: LLMGateway
    knowledge: KnowledgeIndex
    config: Config = field(default_factory=Config)
    library: PromptLibrary = field(default_factory=default_library)
    vocab: VocabularySets = field(default_factory=VocabularySets.load)
    command_docs: dict[str, str] = field(default_factory=load_command_docs)

    def retrieve(self, query: str, stage: str, context: str = "",
                 restrict_cases: Iterable[str] | None = None) -> RetrievalResult:
        if self.config.retrieval_mode == "single_index":
            return self.knowledge.retrieve_single_index(query, context)
        return self.knowledge.retrieve(query, stage, context, restrict_cases=restrict_cases)


# formatting helpers


def format_files(files: Iterable[FoamFile]) -> str:
    """Readable dump of files for prompts: one ``<file>`` element per file."""
    return "\n".join(f'<file path="{f.key}">\n{f.content}\n</file>' for f in files)


def case_tree(keys: Iterable[str]) -> str:
    folders: dict[str, list[str]] = {}
    for key in keys:
        folder, _, name = key.rpartition("/")
        folders.setdefault(folder or ".", []).append(name)
    return "\n".join(f"{folder}/: {', '.join(names)}" for folder, names in sorted(folders.items()))


def _descriptor_info(d: CaseDescriptor | None) -> str:
    return "" if d is None else json.dumps(d.model_dump())


def descriptor_query(d: CaseDescriptor | None) -> str:
    """Retrieval query built from the classified requirement, in the index's listing format."""
    if d is None:
        return ""
    return (f"case name: {d.case_name}\ncase domain: {d.case_domain}\n"
            f"case category: {d.case_category}\ncase solver: {d.case_solver}")


# architect


_PHYSICS_FILES = {
    "transportProperties", "physicalProperties", "momentumTransport", "turbulenceProperties",
    "thermophysicalProperties", "g", "dynamicMeshDict",
}
_MESH_DICTS = ("blockMeshDict", "snappyHexMeshDict")


def infer_dependencies(files: list[tuple[str, str]]) -> list[tuple[str, ...]]:
    """Dependency keys for each ``(folder, file_name)`` of a plan.

    Field files in ``0`` depend on the physics files in ``constant`` and on
    the mesh dictionaries (patch names); ``constant`` files and the other
    ``system`` dictionaries depend on ``system/controlDict`` (solver choice).
    """
    keys = {file_key(folder, name) for folder, name in files}
    control = "system/controlDict" if "system/controlDict" in keys else None
    physics = sorted(k for k in keys if k.startswith("constant/") and k.rsplit("/", 1)[-1] in _PHYSICS_FILES)
    meshes = sorted(file_key("system", m) for m in _MESH_DICTS if file_key("system", m) in keys)
    out = []
    for folder, name in files:
        top = folder.split("/", 1)[0]
        if top == "0":
            deps = physics + meshes
        elif top in ("constant", "system") and control and file_key(folder, name) != control:
            deps = [control]
        else:
            deps = []
        out.append(tuple(deps))
    return out


def _folder_counts(payload: dict) -> str:
    folders = payload.get("folders") or {}
    if not folders:
        return ""
    parts = [f"{len(names)} files in {folder}" for folder, names in folders.items()]
    return "Reference case file counts: " + ", ".join(parts) + "."


def architect_plan(state: CaseState, kit: AgentKit) -> tuple[CaseDescriptor, SimulationPlan, RetrievalResult]:
    """Classify the requirement, retrieve a reference case and decompose it into files."""
    prompts = kit.library.render("case_description", {
        "user_requirement": state.user_requirement, **kit.vocab.as_prompt_lists(),
    })
    raw: CaseDescriptionOut = kit.gateway.complete_structured(prompts, "case_description", "case_description")
    descriptor = validate_descriptor(CaseDescriptor(**raw.model_dump()), kit.vocab)

    retrieved = kit.retrieve(descriptor_query(descriptor), "architect")
    top = next((m.payload for m in retrieved.matches if m.payload.get("kind") == "tutorial_structure"), None)
    source = next((m.payload.get("case_path", "") for m in retrieved.matches if m.payload.get("case_path")), "")

    prompts = kit.library.render("task_decomposition", {
        "user_requirement": state.user_requirement,
        "dir_structure": retrieved.formatted_context,
        "dir_counts_str": _folder_counts(top) if top else "",
    })
    subtasks: SubtaskPlan = kit.gateway.complete_structured(prompts, "task_decomposition", "subtasks")
    if not subtasks.subtasks:
        raise EmptyPlan("task decomposition returned no subtasks")

    seen: set[str] = set()
    pairs: list[tuple[str, str]] = []
    for s in subtasks.subtasks:
        folder = normalize_folder(s.folder_name)
        key = file_key(folder, s.file_name)
        if key not in seen:
            seen.add(key)
            pairs.append((folder, s.file_name))
    deps = infer_dependencies(pairs)
    plan = SimulationPlan(
        files=tuple(
            PlannedFile(file_name=name, folder_name=folder, dependencies=d, priority=i)
            for i, ((folder, name), d) in enumerate(zip(pairs, deps))
        ),
        source_reference=source,
    )
    return descriptor, plan, retrieved


def replan(plan: SimulationPlan, add: Iterable[tuple[str, str]] = (), drop: Iterable[str] = ()) -> SimulationPlan:
    """Plan with files added or removed; dependencies are re-inferred."""
    drop = set(drop)
    pairs = [(f.folder_name, f.file_name) for f in plan.files if f.key not in drop]
    for folder, name in add:
        if (folder, name) not in pairs:
            pairs.append((folder, name))
    deps = infer_dependencies(pairs)
    return SimulationPlan(
        files=tuple(
            PlannedFile(file_name=name, folder_name=folder, dependencies=d, priority=i)
            for i, ((folder, name), d) in enumerate(zip(pairs, deps))
        ),
        source_reference=plan.source_reference,
    )


# meshing

_GMSH = re.compile(r"\bgmsh\b", re.I)
_QUOTED_NAME = re.compile(r"[\"'`]([A-Za-z_][A-Za-z0-9_]*)[\"'`]")


def boundary_names_from(requirement: str) -> tuple[str, ...]:
    """Quoted identifiers in the requirement, in order, without repeats."""
    names: list[str] = []
    for name in _QUOTED_NAME.findall(requirement):
        if name not in names and name not in ("empty", "U", "p", "nu", "T"):
            names.append(name)
    return tuple(names)


def select_mesh_mode(requirement: str, attachments: Iterable[str] = ()) -> MeshSpec:
    """Rule cascade: attached .msh, then attached mesh dictionaries, then a gmsh mention, else native."""
    attachments = tuple(str(a) for a in attachments)
    names = boundary_names_from(requirement)
    for a in attachments:
        if a.lower().endswith(".msh"):
            return MeshSpec(mode="external_msh", source_path=a, boundary_names=names, attachments=attachments)
    for a in attachments:
        if Path(a).name in _MESH_DICTS:
            return MeshSpec(mode="external_dicts", source_path=a, boundary_names=names, attachments=attachments)
    if _GMSH.search(requirement):
        return MeshSpec(mode="gmsh_script", boundary_names=names, attachments=attachments)
    return MeshSpec(mode="native", boundary_names=names, attachments=attachments)


class MeshArtifacts(BaseModel):
    model_config = ConfigDict(frozen=True)

    plan: SimulationPlan
    commands: tuple[str, ...]
    files: tuple[FoamFile, ...] = ()
    artifacts: dict[str, str] = Field(default_factory=dict)


GMSH_SCRIPT = "generate_mesh.py"
GMSH_OUTPUT = "mesh.msh"


def prepare_mesh(state: CaseState, spec: MeshSpec, kit: AgentKit | None = None) -> MeshArtifacts:
    """Adjust the plan for the chosen mesh mode and list the polyMesh-producing commands.

    Commands are not run here; they are injected into the Allrun so that every
    execution rebuilds the mesh.
    """
    if state.plan is None:
        raise EmptyPlan("meshing needs a plan")
    plan = state.plan
    keys = set(plan.keys())
    mesh_keys = [file_key("system", m) for m in _MESH_DICTS]

    if spec.mode == "native":
        plan = replan(plan, add=[("system", "blockMeshDict")])
        commands = ["blockMesh"]
        if "system/snappyHexMeshDict" in keys:
            commands.append("snappyHexMesh -overwrite")
        return MeshArtifacts(plan=plan, commands=tuple(commands))

    if spec.mode == "external_dicts":
        given: list[FoamFile] = []
        for path in spec.attachments:
            p = Path(path)
            if p.name in _MESH_DICTS and p.is_file():
                given.append(FoamFile(file_name=p.name, folder_name="system", content=p.read_text("utf-8")))
        names = {f.file_name for f in given}
        plan = replan(plan, add=[("system", n) for n in sorted(names)])
        commands = ["blockMesh"] if "blockMeshDict" in names or "system/blockMeshDict" in keys else []
        if "snappyHexMeshDict" in names:
            commands.append("snappyHexMesh -overwrite")
        return MeshArtifacts(plan=plan, commands=tuple(commands), files=tuple(given))

    plan = replan(plan, drop=mesh_keys)
    if spec.mode == "external_msh":
        name = Path(spec.source_path or GMSH_OUTPUT).name
        return MeshArtifacts(plan=plan, commands=(f"gmshToFoam {name}",))

    if kit is None:
        raise ValueError("gmsh_script meshing needs a provider")
    prompts = kit.library.render("mesh_gmsh_script", {
        "user_requirement": state.user_requirement,
        "mesh_file": GMSH_OUTPUT,
        "boundary_names": ", ".join(spec.boundary_names) or "(none named)",
    })
    script = strip_fences(kit.gateway.complete(prompts, "mesh_gmsh_script"))
    if not script:
        raise SchemaViolation("empty mesh generation script")
    return MeshArtifacts(
        plan=plan,
        commands=(f"python3 {GMSH_SCRIPT}", f"gmshToFoam {GMSH_OUTPUT}"),
        artifacts={GMSH_SCRIPT: script},
    )


# input writer


def _similar_file(state: CaseState, planned: PlannedFile, kit: AgentKit, source: str) -> str:
    """Reference content for one planned file: the same file of the reference case when present."""
    details = kit.knowledge.index_set["tutorial_details"] if kit.knowledge.index_set else None
    if details is not None and kit.config.retrieval_mode == "hierarchy":
        for p in details.payloads:
            if p.get("case_path") == source and p.get("file") == planned.key:
                return p["text"]
    query = f"{descriptor_query(state.descriptor)}\n{planned.key}"
    result = kit.retrieve(query, "input_writer", restrict_cases=[source] if source else None)
    return result.formatted_context


def generate_file(state: CaseState, planned: PlannedFile, written: list[FoamFile], kit: AgentKit,
                  source: str = "") -> FoamFile:
    slots = {
        "file_name": planned.file_name,
        "folder_name": planned.folder_name,
        "case_solvers": kit.vocab.as_prompt_lists()["case_solvers"],
        "user_requirement": state.user_requirement,
        "similar_file_text": _similar_file(state, planned, kit, source),
    }
    system, user = kit.library.render("file_generation", slots)
    if kit.config.file_dependency_enabled and written:
        user += kit.library.render("file_generation_context", {"written_files": format_files(written)})[1]
    content = strip_fences(kit.gateway.complete((system, user), "file_generation"))
    if not content:
        raise SchemaViolation(f"empty content generated for {planned.key}")
    return FoamFile(file_name=planned.file_name, folder_name=planned.folder_name, content=content + "\n")


def _parse_command_list(text: str) -> list[str]:
    body = strip_fences(text)
    try:
        data = json.loads(body)
        if isinstance(data, list):
            return [str(x).strip() for x in data if str(x).strip()]
    except json.JSONDecodeError:
        pass
    out = []
    for line in body.splitlines():
        line = line.strip().lstrip("-*0123456789.) ").strip("`'\", ")
        if line:
            out.append(line)
    return out


def inject_mesh_commands(script: str, commands: Iterable[str], solver: str | None) -> str:
    """Insert missing mesh commands just before the first solver invocation."""
    missing = [c for c in commands if c not in script]
    if not missing:
        return script
    lines = script.rstrip("\n").split("\n")
    at = len(lines)
    solver_line = re.compile(rf"\b{re.escape(solver)}\b|getApplication") if solver else re.compile("getApplication")
    for i, line in enumerate(lines):
        if not line.lstrip().startswith("#") and solver_line.search(line):
            at = i
            break
    inserted = [f"runApplication {c}" if not c.startswith("python") else f"{c} > log.{c.split()[-1]} 2>&1"
                for c in missing]
    return "\n".join(lines[:at] + inserted + lines[at:]) + "\n"


def generate_allrun(state: CaseState, files: list[FoamFile], kit: AgentKit, source: str = "") -> FoamFile:
    keys = [f.key for f in files] + list(state.artifacts)
    structure = case_tree(keys + [ALLRUN])
    info = _descriptor_info(state.descriptor)
    reference = kit.retrieve(descriptor_query(state.descriptor), "runner",
                             restrict_cases=[source] if source else None).formatted_context
    prompts = kit.library.render("command_generation", {
        "commands": ", ".join(kit.command_docs),
        "dir_structure": structure,
        "case_info": info,
        "allrun_reference": reference,
    })
    commands = _parse_command_list(kit.gateway.complete(prompts, "command_generation"))
    names = [c.split()[0] for c in commands if c.split()]
    help_text = "\n".join(f"{n}: {kit.command_docs[n]}" for n in dict.fromkeys(names) if n in kit.command_docs)
    prompts = kit.library.render("allrun_generation", {
        "commands_help": help_text,
        "allrun_reference": reference,
        "user_requirement": state.user_requirement,
        "dir_structure": structure,
        "case_info": info,
    })
    script = strip_fences(kit.gateway.complete(prompts, "allrun_generation"))
    if not script:
        raise SchemaViolation("empty Allrun script")
    solver = state.descriptor.case_solver if state.descriptor else None
    script = inject_mesh_commands(script + "\n", state.mesh_commands, solver)
    return FoamFile(file_name=ALLRUN, folder_name="", content=script, executable=True)


def lint_messages(files: list[FoamFile], descriptor: CaseDescriptor | None,
                  boundary_names: Iterable[str] = ()) -> list[str]:
    report = lint_case(files, descriptor, boundary_names)
    msgs = [f"{i.kind}: {i.detail}" for i in report]
    msgs.extend(f"parse_error: {e}" for e in report.parse_errors)
    return msgs


def write_inputs(state: CaseState, kit: AgentKit) -> tuple[list[FoamFile], list[str]]:
    """Generate every planned file in dependency order, then the Allrun script.

    Files already present in the state (e.g. attached mesh dictionaries) are
    kept and count as written context. Returns the files and lint findings.
    """
    if state.plan is None or not state.plan.files:
        raise EmptyPlan("no planned files to write")
    source = state.plan.source_reference
    existing = {f.key: f for f in state.foamfiles}
    written: list[FoamFile] = []
    for planned in generation_order(state.plan, kit.config.file_dependency_enabled):
        if planned.key == ALLRUN:
            continue
        if planned.key in existing:
            written.append(existing[planned.key])
            continue
        written.append(generate_file(state, planned, written, kit, source))
    written.append(generate_allrun(state, written, kit, source))
    boundary = state.mesh.boundary_names if state.mesh else ()
    return written, lint_messages(written, state.descriptor, boundary)


# reviewer


class ReviewAnalysis(BaseModel):
    analysis_text: str
    proposed_modifications: list[FoamFile] = Field(default_factory=list)
    guard_notes: list[str] = Field(default_factory=list)


_NUM = r"([-+]?\d*\.?\d+)(?:\s*(?:\\times|×|x|\*)\s*10\s*\^?\s*\{?\s*([-+]?\d+)\s*\}?|[eE]([-+]?\d+))?"
_PIN_PATTERNS = {
    "nu": re.compile(r"(?:\bnu\b|viscosity)[^.;]*?(?:value of|=|is|of)\s*\$?\s*" + _NUM, re.I),
    "deltaT": re.compile(r"time\s*step\s*(?:of|=|is)?\s*" + _NUM, re.I),
    "endTime": re.compile(r"(?:from\s+(?:time\s+)?\S+\s+to|until|end\s*time\s*(?:of|=|is)?)\s*(?:t\s*=\s*)?" + _NUM,
                          re.I),
}


def _to_float(m: re.Match) -> float:
    base = float(m.group(1))
    exp = m.group(2) or m.group(3)
    return base * 10 ** int(exp) if exp else base


def pinned_parameters(requirement: str) -> dict[str, float]:
    """Parameter values the requirement fixes, where a simple pattern finds them."""
    out = {}
    for key, pattern in _PIN_PATTERNS.items():
        m = pattern.search(requirement)
        if m:
            out[key] = _to_float(m)
    return out


def _entry_pattern(key: str) -> re.Pattern:
    return re.compile(rf"^(\s*{re.escape(key)}\b[^;\n]*?)([-+]?\d*\.?\d+(?:[eE][-+]?\d+)?)(\s*;)", re.M)


def guard_pinned(mods: list[FoamFile], pinned: dict[str, float]) -> tuple[list[FoamFile], list[str]]:
    """Reset pinned entries that a modification changed back to the required value."""
    notes: list[str] = []
    out: list[FoamFile] = []
    for mod in mods:
        content = mod.content
        for key, value in pinned.items():
            pattern = _entry_pattern(key)

            def restore(m: re.Match, key=key, value=value) -> str:
                if math.isclose(float(m.group(2)), value, rel_tol=1e-9, abs_tol=1e-15):
                    return m.group(0)
                notes.append(f"{mod.key}: kept {key} at {value:g} (requirement) instead of {m.group(2)}")
                return f"{m.group(1)}{value:g}{m.group(3)}"

            content = pattern.sub(restore, content)
        out.append(mod if content == mod.content else mod.model_copy(update={"content": content}))
    return out, notes


def render_history(history: Iterable[AttemptRecord], library: PromptLibrary) -> str:
    return "\n".join(
        library.render("history_entry", {
            "attempt_number": h.attempt_number,
            "error_logs": h.error_logs,
            "review_content": h.review_analysis,
        })[1]
        for h in history
    )


def _review_error_text(state: CaseState) -> str:
    text = state.execution_logs
    if state.lint_findings:
        text += "\n\nStatic check findings:\n" + "\n".join(f"- {m}" for m in state.lint_findings)
    return text


def review(state: CaseState, kit: AgentKit) -> ReviewAnalysis:
    """Analyse the latest failure and propose corrected files.

    The newest history entry is the failure under review; earlier entries
    make up the rendered history of the subsequent-error prompt.
    """
    if state.run_status != "failure":
        raise ReviewPreconditionError(f"review needs a failed run, status is {state.run_status!r}")
    if not state.execution_logs.strip():
        raise ReviewPreconditionError("review needs error logs")
    error_text = _review_error_text(state)
    files = format_files(state.foamfiles)
    previous = state.history[:-1]
    slots = {
        "tutorial_reference": state.tutorial_reference,
        "foamfiles": files,
        "error_logs": error_text,
        "user_requirement": state.user_requirement,
    }
    if previous:
        template = "error_analysis_subsequent"
        slots["history_text"] = render_history(previous, kit.library)
    else:
        template = "error_analysis_initial"
    analysis = kit.gateway.complete(kit.library.render(template, slots), template).strip()

    prompts = kit.library.render("file_correction", {
        "foamfiles": files,
        "error_logs": error_text,
        "review_content": analysis,
        "user_requirement": state.user_requirement,
    })
    batch: FoamFileBatch = kit.gateway.complete_structured(prompts, "file_correction", "foamfiles")
    if not batch.list_foamfile:
        raise EmptyCorrection("file correction returned no files")
    current = {f.key: f for f in state.foamfiles}
    mods: list[FoamFile] = []
    for out in batch.list_foamfile:
        f = FoamFile(
            file_name=out.file_name,
            folder_name=out.folder_name,
            content=out.content,
            executable=out.file_name == ALLRUN and normalize_folder(out.folder_name) == "",
        )
        old = current.get(f.key)
        if old is not None and old.content == f.content:
            continue
        mods.append(f)
    mods, notes = guard_pinned(mods, pinned_parameters(state.user_requirement))
    mods = [m for m in mods if current.get(m.key) is None or current[m.key].content != m.content]
    return ReviewAnalysis(analysis_text=analysis, proposed_modifications=mods, guard_notes=notes)


def apply_modifications(state: CaseState, mods: Iterable[FoamFile]) -> CaseState:
    """Return a copy of *state* with each modification replacing or adding its file."""
    files = list(state.foamfiles)
    index = {f.key: i for i, f in enumerate(files)}
    for mod in mods:
        if mod.key in index:
            files[index[mod.key]] = mod
        else:
            index[mod.key] = len(files)
            files.append(mod)
    return state.model_copy(update={"foamfiles": files})


# HPC runner


class HPCConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    cluster_name: str = ""
    account: str | None = None
    nodes: int = Field(1, gt=0)
    tasks: int | None = Field(None, gt=0)
    walltime: str = "02:00:00"
    partition_hints: list[str] = Field(default_factory=lambda: ["cpu", "regular"])
    memory: str = "128GB"
    job_name: str = "Sim"
    case_path: str = "./case"


_ACCOUNT = re.compile(r"\baccount\s+(?:is|number is|:)?\s*([A-Za-z0-9_\-]+)", re.I)
_SUBDOMAINS = re.compile(r"(\d+)\s+(?:sub-?domains|processors|cores|tasks)", re.I)
_CLUSTER = re.compile(r"\bin\s+([A-Za-z0-9_\-]+)\s+cluster\b", re.I)


def hpc_config_from_requirement(requirement: str, **overrides) -> HPCConfig:
    values: dict = {}
    if m := _ACCOUNT.search(requirement):
        values["account"] = m.group(1).rstrip(".")
    if m := _SUBDOMAINS.search(requirement):
        values["tasks"] = int(m.group(1))
    if m := _CLUSTER.search(requirement):
        values["cluster_name"] = m.group(1)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return HPCConfig(**values)


def _subdomains(state: CaseState) -> int | None:
    f = state.file("system", "decomposeParDict")
    if f is None:
        return None
    m = re.search(r"^\s*numberOfSubdomains\s+(\d+)\s*;", f.content, re.M)
    return int(m.group(1)) if m else None


def decompose_par_dict(subdomains: int, method: str = "scotch") -> FoamFile:
    content = (
        "FoamFile\n{\n    format      ascii;\n    class       dictionary;\n"
        "    object      decomposeParDict;\n}\n\n"
        f"numberOfSubdomains {subdomains};\n\nmethod          {method};\n"
    )
    return FoamFile(file_name="decomposeParDict", folder_name="system", content=content)


def hpc_tasks(state: CaseState, cfg: HPCConfig) -> int:
    return cfg.tasks or _subdomains(state) or 1


def generate_hpc_script(state: CaseState, cfg: HPCConfig) -> str:
    """Slurm batch script that runs the case's Allrun in parallel."""
    if not cfg.account:
        raise MissingAccount("an HPC account is required to submit jobs")
    tasks = hpc_tasks(state, cfg)
    per_node = math.ceil(tasks / cfg.nodes)
    constraint = cfg.partition_hints[0] if cfg.partition_hints else "cpu"
    qos = cfg.partition_hints[1] if len(cfg.partition_hints) > 1 else "regular"
    lines = [
        "#!/bin/bash",
        f"#SBATCH -A {cfg.account}",
        f"#SBATCH -C {constraint}",
        f"#SBATCH -q {qos}",
        f"#SBATCH -N {cfg.nodes}",
        f"#SBATCH -n {tasks}",
        f"#SBATCH --ntasks-per-node={per_node}",
        f"#SBATCH -t {cfg.walltime}",
        f"#SBATCH --mem={cfg.memory}",
        f"#SBATCH -J {cfg.job_name}",
        "#SBATCH -o %j.out",
        "#SBATCH -e %j.err",
        "",
        "# Initialize error handling",
        "set -e",
        "",
        "# Change to case directory",
        f"cd {cfg.case_path} || exit 1",
        "",
        "# Create log directory if it doesn't exist",
        "mkdir -p logs",
        "",
        "# Run the simulation",
        'echo "Starting OpenFOAM simulation at $(date)"',
        "./Allrun -parallel",
        "if [ $? -eq 0 ]; then",
        '    echo "Simulation completed successfully at $(date)"',
        "    exit 0",
        "else",
        '    echo "Simulation failed at $(date)"',
        "    exit 1",
        "fi",
    ]
    return "\n".join(lines) + "\n"


def hpc_case_files(state: CaseState, cfg: HPCConfig) -> list[FoamFile]:
    """Files the parallel run needs: a decomposeParDict matching the task count."""
    tasks = hpc_tasks(state, cfg)
    if _subdomains(state) == tasks:
        return []
    return [decompose_par_dict(tasks)]


# visualization

_VIS_REQUEST = re.compile(r"\b(?:visuali[sz]e|visuali[sz]ation|plot|contour)\b", re.I)
_QUANTITY_WORDS = (
    (re.compile(r"velocity", re.I), "U"),
    (re.compile(r"pressure", re.I), "p"),
    (re.compile(r"temperature", re.I), "T"),
    (re.compile(r"vorticity", re.I), "vorticity"),
)


def visualization_requested(requirement: str) -> bool:
    return bool(_VIS_REQUEST.search(requirement))


def visualization_quantity(requirement: str) -> str:
    m = _VIS_REQUEST.search(requirement)
    tail = requirement[m.start():] if m else requirement
    quoted = re.search(r"\(\s*['\"]([A-Za-z_.]+)['\"]\s*\)", tail)
    if quoted:
        return quoted.group(1)
    for pattern, name in _QUANTITY_WORDS:
        if pattern.search(tail):
            return name
    return "U"


VIS_SCRIPT = "visualize.py"


def visualize(
    state: CaseState,
    kit: AgentKit,
    executor: Executor,
    case_root: Path,
    quantity: str | None = None,
    plane: str | None = None,
    time: str | float | None = None,
    output_name: str | None = None,
) -> tuple[list[str], str]:
    """Generate, run and repair a plotting script until it saves an image.

    Returns the image paths relative to *case_root* and the final script.
    """
    quantity = quantity or visualization_quantity(state.user_requirement)
    output_name = output_name or f"{quantity}.png"
    described = quantity
    if plane:
        described += f" on the {plane} plane"
    if time is not None:
        described += f" at time {time}"
    slots = {
        "backend": kit.config.visualization_backend,
        "output_name": output_name,
        "user_requirement": state.user_requirement,
        "quantity": described,
        "dir_structure": case_tree(f.key for f in state.foamfiles),
    }
    system, user = kit.library.render("visualization_script", slots)
    script, errors = "", ""
    for attempt in range(1, kit.config.visualization_max_attempts + 1):
        if attempt > 1:
            user = kit.library.render("visualization_correction", {
                "script": script, "error_logs": errors, "output_name": output_name,
            })[1]
        template = "visualization_script" if attempt == 1 else "visualization_correction"
        script = strip_fences(kit.gateway.complete((system, user), template))
        case_root.mkdir(parents=True, exist_ok=True)
        (case_root / VIS_SCRIPT).write_text(script + "\n", encoding="utf-8")
        result = executor.run_script(case_root, VIS_SCRIPT, outputs=[output_name])
        if result.status == "success" and (case_root / output_name).is_file():
            return [output_name], script
        errors = "\n".join(f"{name}:\n{text}" for name, text in result.logs.items()) or \
            f"{VIS_SCRIPT} did not produce {output_name}"
    raise VisualizationExhausted(kit.config.visualization_max_attempts)
