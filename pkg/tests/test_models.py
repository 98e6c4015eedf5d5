from __future__ import annotations

import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from foamforge.errors import ConfigError, CyclicDependency, DescriptorError, UnknownVocabularyTerm
from foamforge.models import (
    AttemptRecord,
    CaseDescriptor,
    CaseState,
    Config,
    FoamFile,
    PlannedFile,
    SimulationPlan,
    VocabularySets,
    folder_rank,
    generation_order,
    load_state,
    make_config,
    materialize,
    normalize_folder,
    save_state,
    validate_descriptor,
)

VOCAB = VocabularySets(frozenset({"incompressible"}), frozenset({"laminar"}), frozenset({"icoFoam"}))


def desc(**kw):
    base = dict(case_name="cavity", case_domain="incompressible", case_category="laminar", case_solver="icoFoam")
    return CaseDescriptor(**{**base, **kw})


# descriptor validation


def test_descriptor_in_vocabulary_accepted():
    assert validate_descriptor(desc(), VOCAB) == desc()


def test_descriptor_out_of_vocabulary_solver():
    with pytest.raises(UnknownVocabularyTerm) as info:
        validate_descriptor(desc(case_solver="magicFoam"), VOCAB)
    assert info.value.field == "case_solver" and info.value.value == "magicFoam"


@pytest.mark.parametrize("name", ["a/b", "a\\b", "..", "  "])
def test_descriptor_unsafe_name(name):
    with pytest.raises(DescriptorError):
        validate_descriptor(desc(case_name=name), VOCAB)


def test_descriptor_name_trimmed():
    assert validate_descriptor(desc(case_name=" cavity "), VOCAB).case_name == "cavity"


def test_empty_vocabulary_rejected():
    with pytest.raises(DescriptorError):
        validate_descriptor(desc(), VocabularySets(frozenset(), frozenset({"x"}), frozenset({"y"})))


def test_bundled_vocabulary_loads():
    vocab = VocabularySets.load()
    assert "icoFoam" in vocab.solvers and "incompressible" in vocab.domains


# plan records


@pytest.mark.parametrize("raw,expected", [(None, ""), (".", ""), ("./", ""), ("./system", "system"), ("0/", "0")])
def test_folder_normalization(raw, expected):
    assert normalize_folder(raw) == expected


def test_plan_rejects_duplicate_files():
    with pytest.raises(ValueError):
        SimulationPlan(files=(PlannedFile(file_name="U", folder_name="0"), PlannedFile(file_name="U", folder_name="0")))


def test_plan_rejects_dangling_dependency():
    with pytest.raises(ValueError):
        SimulationPlan(files=(PlannedFile(file_name="U", folder_name="0", dependencies=("0/p",)),))


# generation order


def pf(key, deps=()):
    folder, _, name = key.rpartition("/")
    return PlannedFile(file_name=name, folder_name=folder, dependencies=tuple(deps))


def test_folder_precedence_without_dependencies():
    plan = SimulationPlan(files=(pf("0/U"), pf("constant/transportProperties"), pf("system/controlDict"),
                                 pf("0/p"), pf("system/fvSchemes")))
    assert [f.key for f in generation_order(plan)] == [
        "system/controlDict", "system/fvSchemes", "constant/transportProperties", "0/U", "0/p"]


def test_single_file_plan():
    plan = SimulationPlan(files=(pf("system/controlDict"),))
    assert [f.key for f in generation_order(plan)] == ["system/controlDict"]


def test_cycle_reported():
    plan = SimulationPlan(files=(pf("system/A", ["system/B"]), pf("system/B", ["system/A"])))
    with pytest.raises(CyclicDependency) as info:
        generation_order(plan)
    assert set(info.value.cycle) == {"system/A", "system/B"}


def test_dependency_disabled_keeps_plan_order():
    plan = SimulationPlan(files=(pf("0/U"), pf("system/controlDict")))
    assert [f.key for f in generation_order(plan, False)] == ["0/U", "system/controlDict"]


SIX_FILE_PLAN = SimulationPlan(files=(
    pf("0/U", ["constant/transportProperties"]),
    pf("Allrun"),
    pf("constant/transportProperties", ["system/controlDict"]),
    pf("system/fvSchemes", ["0/p"]),
    pf("0/p"),
    pf("system/controlDict"),
))
# frozen output of the permutation oracle below on SIX_FILE_PLAN
SIX_FILE_ORDER = ["system/controlDict", "constant/transportProperties", "0/U", "0/p", "system/fvSchemes", "Allrun"]


def brute_force_order(plan: SimulationPlan) -> list[str]:
    """Canonical minimum over every valid permutation, keyed by (folder rank, plan index)."""
    index = {f.key: i for i, f in enumerate(plan.files)}

    def valid(perm):
        pos = {f.key: i for i, f in enumerate(perm)}
        return all(pos[d] < pos[f.key] for f in perm for d in f.dependencies)

    best = min((p for p in itertools.permutations(plan.files) if valid(p)),
               key=lambda p: [(folder_rank(f.folder_name), index[f.key]) for f in p])
    return [f.key for f in best]


def test_six_file_plan_matches_frozen_oracle():
    assert brute_force_order(SIX_FILE_PLAN) == SIX_FILE_ORDER
    assert [f.key for f in generation_order(SIX_FILE_PLAN)] == SIX_FILE_ORDER


FOLDERS = ["system", "constant", "0", "", "constant/polyMesh"]


@st.composite
def acyclic_plans(draw, max_files=10):
    n = draw(st.integers(1, max_files))
    files = []
    for i in range(n):
        folder = draw(st.sampled_from(FOLDERS))
        files.append((folder, f"f{i}"))
    # edges only from later to earlier positions in a random permutation keep the graph acyclic
    perm = draw(st.permutations(list(range(n))))
    rank = {v: i for i, v in enumerate(perm)}
    deps = []
    for i in range(n):
        earlier = [j for j in range(n) if rank[j] < rank[i]]
        chosen = draw(st.lists(st.sampled_from(earlier), unique=True, max_size=3)) if earlier else []
        deps.append(chosen)

    def key(j):
        folder, name = files[j]
        return f"{folder}/{name}" if folder else name

    return SimulationPlan(files=tuple(
        PlannedFile(file_name=name, folder_name=folder, dependencies=tuple(key(j) for j in deps[i]))
        for i, (folder, name) in enumerate(files)))


def is_canonical_topological(plan: SimulationPlan, order: list[PlannedFile]) -> bool:
    """Brute-force validity: a permutation, dependencies first, and at every step the
    (folder rank, plan index)-smallest file among those whose dependencies are placed."""
    index = {f.key: i for i, f in enumerate(plan.files)}
    if sorted(f.key for f in order) != sorted(index):
        return False
    placed: set[str] = set()
    for f in order:
        if not set(f.dependencies) <= placed:
            return False
        ready = [g for g in plan.files if g.key not in placed and set(g.dependencies) <= placed]
        best = min(ready, key=lambda g: (folder_rank(g.folder_name), index[g.key]))
        if best.key != f.key:
            return False
        placed.add(f.key)
    return True


@settings(max_examples=100, deadline=None)
@given(acyclic_plans())
def test_generation_order_is_canonical_topological(plan):
    assert is_canonical_topological(plan, generation_order(plan))


@settings(max_examples=40, deadline=None)
@given(acyclic_plans(max_files=7))
def test_generation_order_equals_permutation_oracle(plan):
    assert [f.key for f in generation_order(plan)] == brute_force_order(plan)


@settings(max_examples=50, deadline=None)
@given(acyclic_plans())
def test_generation_order_disabled_is_identity(plan):
    assert list(generation_order(plan, False)) == list(plan.files)


# config


def test_config_defaults():
    c = Config()
    assert (c.max_loops, c.reviewer_enabled, c.file_dependency_enabled, c.temperature,
            c.retrieval_mode, c.top_k, c.embedding_dim) == (10, True, True, 0.0, "hierarchy", 5, 1536)


@pytest.mark.parametrize("bad", [{"max_loops": 0}, {"temperature": 1.5}, {"retrieval_mode": "flat"}, {"nope": 1}])
def test_make_config_rejects(bad):
    with pytest.raises(ConfigError):
        make_config(**bad)


# state persistence


def sample_state() -> CaseState:
    files = [FoamFile(file_name="controlDict", folder_name="system", content="application icoFoam;\n"),
             FoamFile(file_name="Allrun", folder_name="", content="#!/bin/sh\n", executable=True)]
    return CaseState(
        case_id="case-1", user_requirement="cavity", descriptor=desc(), foamfiles=files,
        history=[AttemptRecord(attempt_number=1, file_snapshot=tuple(files), error_logs="e", fatal_count=1)],
        run_status="failure", loop_count=1, token_usage=12,
    )


def test_state_round_trip(tmp_path):
    state = sample_state()
    path = save_state(state, tmp_path)
    assert path == tmp_path / "case-1" / "state.json"
    assert load_state(tmp_path, "case-1") == state


@settings(max_examples=30, deadline=None)
@given(st.text(min_size=1), st.integers(0, 10), st.lists(st.text(min_size=1), max_size=3))
def test_state_round_trip_property(tmp_path_factory, requirement, loops, errors):
    tmp = tmp_path_factory.mktemp("s")
    state = CaseState(case_id="c", user_requirement=requirement, loop_count=loops, errors=errors)
    save_state(state, tmp)
    assert load_state(tmp, "c") == state


def test_materialize_layout(tmp_path):
    state = sample_state()
    state.artifacts["generate_mesh.py"] = "print(1)\n"
    root = materialize(state, tmp_path)
    assert root == tmp_path / "case-1" / "case"
    assert (root / "system" / "controlDict").read_text() == "application icoFoam;\n"
    assert (root / "Allrun").stat().st_mode & 0o111
    assert (root / "generate_mesh.py").is_file()


def test_materialize_copies_msh_attachment(tmp_path):
    msh = tmp_path / "box.msh"
    msh.write_text("$MeshFormat\n")
    state = CaseState(case_id="c", user_requirement="r", attachments=[str(msh)])
    root = materialize(state, tmp_path / "w")
    assert (root / "box.msh").read_text() == "$MeshFormat\n"
