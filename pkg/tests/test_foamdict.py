from __future__ import annotations

import re
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from foamforge.errors import ParseError
from foamforge.foamdict import Dimensions, Directive, DictionaryTree, lint_case, parse, serialize
from foamforge.knowledge import bundled_corpus_root, ingest_corpus
from foamforge.models import CaseDescriptor, FoamFile

from conftest import FIXTURES

DICT_FIXTURES = sorted((FIXTURES / "dicts").iterdir())


def test_fixture_corpus_size():
    assert len(DICT_FIXTURES) >= 20


def test_minimal_controldict():
    tree = parse("FoamFile { version 2.0; format ascii; class dictionary; object controlDict; }\nstartTime 0;\n",
                 expected_name="controlDict")
    assert tree.object_name == "controlDict"
    assert tree.entries == {"startTime": 0}
    assert tree.header == {"version": 2.0, "format": "ascii", "class": "dictionary", "object": "controlDict"}


def test_nested_boundary_field():
    tree = parse("boundaryField { inlet { type fixedValue; value uniform (1 0 0); } }")
    assert tree.get("boundaryField/inlet/type") == "fixedValue"
    inlet = tree.entries["boundaryField"]["inlet"]
    assert isinstance(inlet, dict) and not any(isinstance(v, dict) for v in inlet.values())


def test_dimensioned_scalar_round_trip():
    tree = parse("nu [0 2 -1 0 0 0 0] 1e-05;")
    value = tree.entries["nu"]
    assert Dimensions((0, 2, -1, 0, 0, 0, 0)) in value and 1e-05 in value
    assert parse(serialize(tree)) == tree


def test_comments_stripped():
    tree = parse("// line\n/* block\n comment */ a 1; // tail\n")
    assert tree.entries == {"a": 1}


def test_directives_kept_opaque():
    tree = parse('#include "initialConditions"\na $b;\n')
    assert any(isinstance(v, Directive) and "initialConditions" in v.text for v in tree.entries.values())
    assert parse(serialize(tree)) == tree


def test_unbalanced_brace_line():
    with pytest.raises(ParseError) as info:
        parse("a 1;\nb\n{\n    c 2;\n")
    assert info.value.line == 3 and "opened at line 3" in str(info.value)


def test_stray_closing_brace_line():
    with pytest.raises(ParseError) as info:
        parse("a 1;\n}\n")
    assert info.value.line == 2


def test_missing_semicolon_reports_line():
    with pytest.raises(ParseError) as info:
        parse("a 1;\nb 2\n}")
    assert info.value.line == 3


def test_header_object_mismatch():
    with pytest.raises(ParseError):
        parse("FoamFile { object U; }\n", expected_name="p")


def test_empty_entries_serialize_header_only():
    text = serialize(DictionaryTree(header={"format": "ascii", "class": "dictionary", "object": "x"}))
    assert parse(text).entries == {}
    assert text.lstrip().startswith("FoamFile")


@pytest.mark.parametrize("path", DICT_FIXTURES, ids=lambda p: p.name)
def test_round_trip_fixture(path: Path):
    tree = parse(path.read_text("utf-8"))
    assert parse(serialize(tree)) == tree


def test_round_trip_covers_required_constructs():
    trees = [parse(p.read_text("utf-8")) for p in DICT_FIXTURES]
    assert all(t.header is not None for t in trees)
    text = "\n".join(p.read_text("utf-8") for p in DICT_FIXTURES)
    assert "boundaryField" in text and re.search(r"\[\s*0 2 -1 0 0 0 0\s*\]", text)
    assert any(isinstance(v, list) for t in trees for v in t.entries.values())


# generated trees

_words = st.from_regex(r"[A-Za-z][A-Za-z0-9_]{0,8}", fullmatch=True).filter(
    lambda w: w not in ("FoamFile", "true", "false", "on", "off", "yes", "no", "none"))
_scalars = st.one_of(
    st.integers(-10**6, 10**6),
    st.floats(allow_nan=False, allow_infinity=False, width=64).filter(lambda x: abs(x) < 1e12),
    _words,
)
_dims = st.lists(st.integers(-3, 3), min_size=7, max_size=7).map(lambda v: Dimensions(tuple(v)))


def _values(children):
    return st.one_of(
        _scalars,
        st.lists(_scalars, min_size=0, max_size=4),
        st.dictionaries(_words, children, max_size=3),
    )


_value = st.recursive(_scalars, _values, max_leaves=12)


@settings(max_examples=150, deadline=None)
@given(st.dictionaries(_words, st.one_of(_value, _dims), max_size=6))
def test_round_trip_generated(entries):
    tree = parse(serialize(DictionaryTree(entries=entries)))
    assert parse(serialize(tree)) == tree


# lint


def _case_files(case_path: str) -> tuple[list[FoamFile], CaseDescriptor]:
    rec = next(r for r in ingest_corpus(bundled_corpus_root()) if r.path == case_path)
    files = []
    for rel, content in rec.file_contents.items():
        folder, _, name = rel.rpartition("/")
        files.append(FoamFile(file_name=name, folder_name=folder, content=content))
    return files, rec.metadata


CASES = ["incompressible/icoFoam/cavity", "incompressible/simpleFoam/pitzDaily", "basic/laplacianFoam/plateHeat"]


@pytest.mark.parametrize("case", CASES)
def test_consistent_case_lints_clean(case):
    files, meta = _case_files(case)
    report = lint_case(files, meta)
    assert list(report) == [] and report.parse_errors == []


def _replace(files, key, new_content):
    return [f.model_copy(update={"content": new_content}) if f.key == key else f for f in files]


def _mutations(case: str):
    """Seeded faults: (label, files, descriptor, expected kind, file that must be named)."""
    files, meta = _case_files(case)
    out = []
    for f in files:
        if f.folder_name == "0":
            for patch in parse(f.content).entries.get("boundaryField", {}):
                if patch[0] in "#\"$":
                    continue
                pattern = re.compile(rf"^(\s+){re.escape(patch)}\s*$", re.M)
                mutated = pattern.sub(rf"\g<1>{patch}X", f.content, count=1)
                out.append((f"patch-name {f.key}:{patch}", _replace(files, f.key, mutated), meta,
                            "boundary_patch_mismatch", f.key))
        for m in re.finditer(r"\[\s*(-?\d+(?:\s+-?\d+){6})\s*\]", f.content):
            parts = m.group(1).split()
            for broken in (parts[:-1], parts + ["0"]):
                mutated = f.content[:m.start()] + "[" + " ".join(broken) + "]" + f.content[m.end():]
                out.append((f"dimension-length {f.key}:{len(broken)}", _replace(files, f.key, mutated), meta,
                            "dimension_mismatch", f.key))
    out.append(("solver plan", files, meta.model_copy(update={"case_solver": "pisoFoam"}),
                "solver_mismatch", "system/controlDict"))
    control = next(f for f in files if f.key == "system/controlDict")
    mutated = re.sub(r"(application\s+)\w+", r"\g<1>buoyantFoam", control.content)
    out.append(("solver controlDict", _replace(files, control.key, mutated), meta,
                "solver_mismatch", "system/controlDict"))
    return out


MUTATIONS = [m for case in CASES for m in _mutations(case)]


def test_mutation_suite_is_broad():
    kinds = {m[3] for m in MUTATIONS}
    assert kinds == {"boundary_patch_mismatch", "dimension_mismatch", "solver_mismatch"}
    assert len(MUTATIONS) >= 30


@pytest.mark.parametrize("label,files,meta,kind,key", MUTATIONS, ids=[m[0] for m in MUTATIONS])
def test_lint_flags_seeded_fault(label, files, meta, kind, key):
    report = lint_case(files, meta)
    assert any(i.kind == kind and key in i.files for i in report), label


def test_lint_is_pure():
    files, meta = _case_files(CASES[0])
    broken = _replace(files, "0/U", files[[f.key for f in files].index("0/U")].content.replace("movingWall", "lid"))
    assert list(lint_case(broken, meta)) == list(lint_case(broken, meta))


def test_lint_missing_field_reference():
    files, meta = _case_files(CASES[0])
    files = [f for f in files if f.key != "0/p"]
    kinds = {(i.kind, i.files[-1]) for i in lint_case(files, meta)}
    assert ("missing_field_reference", "0/p") in kinds


def test_lint_collects_parse_errors():
    files, meta = _case_files(CASES[0])
    files = _replace(files, "system/fvSchemes", "ddtSchemes {\n")
    report = lint_case(files, meta)
    assert len(report.parse_errors) == 1 and report.parse_errors[0].path == "system/fvSchemes"


def test_boundary_names_supplement_external_mesh():
    u = FoamFile(file_name="U", folder_name="0", content="boundaryField { inlet { type zeroGradient; } }\n")
    report = lint_case([u], None, boundary_names=("inlet", "outlet"))
    assert [i.kind for i in report] == ["boundary_patch_mismatch"]
    assert "outlet" in report[0].detail
