"""Parse, serialize and lint OpenFOAM ASCII dictionaries.

The grammar covers what generated cases contain: the ``FoamFile`` header,
``key value;`` entries, nested ``{}`` blocks, ``()`` lists, ``[]`` dimension
sets, quoted strings, ``#{ ... #}`` verbatim code and ``#``-directives.
Directives and verbatim code are kept as opaque text. Comments are dropped.

Values map onto plain Python types:

* number -> ``int`` / ``float``; bare word or quoted string -> ``str`` (raw,
  quotes included)
* ``( ... )`` -> ``list``; ``{ ... }`` -> ``dict``; ``[ ... ]`` -> :class:`Dimensions`
* an entry with several value tokens -> ``tuple`` of items, no tokens -> ``()``
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator

from .errors import ParseError
from .models import CaseDescriptor, FoamFile, file_key

_NUMBER = re.compile(r"[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?")
_INT = re.compile(r"[+-]?\d+")
_PUNCT = set("{}[]();")
_NON_DICT_SUFFIXES = (".py", ".sh", ".msh", ".geo", ".png", ".jpg", ".stl", ".obj", ".gz", ".vtk", ".csv", ".slurm")


@dataclass(frozen=True)
class Dimensions:
    values: tuple

    def __str__(self) -> str:
        return "[" + " ".join(_scalar(v) for v in self.values) + "]"


@dataclass(frozen=True)
class Directive:
    text: str


@dataclass
class DictionaryTree:
    header: dict[str, Any] | None = None
    entries: dict[str, Any] = field(default_factory=dict)
    anonymous: list[Any] = field(default_factory=list)

    @property
    def object_name(self) -> str | None:
        if self.header is None:
            return None
        obj = self.header.get("object")
        return None if obj is None else str(obj).strip('"')

    def get(self, path: str, default: Any = None) -> Any:
        """Look up a ``/``-separated key path through nested dictionaries."""
        node: Any = self.entries
        for part in path.split("/"):
            if not isinstance(node, dict) or part not in node:
                return default
            node = node[part]
        return node


@dataclass(frozen=True)
class _Tok:
    kind: str  # one of "{}[]();", "word", "string", "verbatim", "eof"
    text: str
    line: int
    col: int


def _tokenize(text: str, path: str | None) -> list[_Tok]:
    toks: list[_Tok] = []
    i, n = 0, len(text)
    line, line_start = 1, 0

    def err(expected: str, at: int | None = None) -> ParseError:
        pos = i if at is None else at
        return ParseError(line, pos - line_start + 1, expected, path)

    while i < n:
        c = text[i]
        if c == "\n":
            line += 1
            line_start = i + 1
            i += 1
            continue
        if c.isspace():
            i += 1
            continue
        if text.startswith("//", i):
            j = text.find("\n", i)
            i = n if j < 0 else j
            continue
        if text.startswith("/*", i):
            j = text.find("*/", i + 2)
            if j < 0:
                raise err("'*/' closing block comment")
            chunk = text[i:j + 2]
            newlines = chunk.count("\n")
            if newlines:
                line += newlines
                line_start = i + chunk.rfind("\n") + 1
            i = j + 2
            continue
        col = i - line_start + 1
        if text.startswith("#{", i):
            j = text.find("#}", i + 2)
            if j < 0:
                raise err("'#}' closing verbatim block")
            chunk = text[i:j + 2]
            toks.append(_Tok("verbatim", chunk, line, col))
            newlines = chunk.count("\n")
            if newlines:
                line += newlines
                line_start = i + chunk.rfind("\n") + 1
            i = j + 2
            continue
        if c == '"':
            j = i + 1
            while j < n and text[j] != '"':
                if text[j] == "\\":
                    j += 1
                elif text[j] == "\n":
                    raise err("closing '\"'", at=i)
                j += 1
            if j >= n:
                raise err("closing '\"'", at=i)
            toks.append(_Tok("string", text[i:j + 1], line, col))
            i = j + 1
            continue
        if c in _PUNCT:
            toks.append(_Tok(c, c, line, col))
            i += 1
            continue
        j = i
        depth = 0
        while j < n:
            d = text[j]
            if depth == 0:
                if d.isspace() or d in "{}[];\"" or text.startswith("//", j) or text.startswith("/*", j):
                    break
                if d == ")":
                    break
                if d == "(":
                    if j == i or text[i:j].isdigit():
                        break
                    depth = 1
            else:
                if d == "\n":
                    raise err("')' closing word", at=j)
                if d == "(":
                    depth += 1
                elif d == ")":
                    depth -= 1
            j += 1
        if depth:
            raise err("')' closing word", at=j)
        toks.append(_Tok("word", text[i:j], line, col))
        i = j
    toks.append(_Tok("eof", "", line, i - line_start + 1))
    return toks


def _number(word: str) -> int | float | None:
    if _INT.fullmatch(word):
        return int(word)
    if _NUMBER.fullmatch(word):
        return float(word)
    return None


class _Parser:
    def __init__(self, toks: list[_Tok], path: str | None) -> None:
        self.toks = toks
        self.pos = 0
        self.path = path

    def peek(self, offset: int = 0) -> _Tok:
        return self.toks[min(self.pos + offset, len(self.toks) - 1)]

    def take(self) -> _Tok:
        tok = self.toks[self.pos]
        self.pos += 1
        return tok

    def fail(self, tok: _Tok, expected: str) -> ParseError:
        return ParseError(tok.line, tok.col, expected, self.path)

    def body(self, opener: _Tok | None) -> tuple[dict, list]:
        entries: dict[str, Any] = {}
        anonymous: list[Any] = []
        while True:
            tok = self.peek()
            if tok.kind == "eof":
                if opener is not None:
                    raise self.fail(opener, f"'}}' to close the block opened at line {opener.line}")
                return entries, anonymous
            if tok.kind == "}":
                if opener is None:
                    raise self.fail(tok, "keyword (unbalanced '}')")
                self.take()
                return entries, anonymous
            if tok.kind == "word" and tok.text.startswith("#"):
                self.take()
                parts = [tok.text]
                while self.peek().line == tok.line and self.peek().kind in ("word", "string"):
                    parts.append(self.take().text)
                text = " ".join(parts)
                entries[text] = Directive(text)
                continue
            if opener is None and (tok.kind == "(" or (
                tok.kind == "word" and _INT.fullmatch(tok.text) and self.peek(1).kind == "(")):
                anonymous.append(self.item())
                continue
            if tok.kind not in ("word", "string"):
                raise self.fail(tok, "keyword")
            self.take()
            if self.peek().kind == "{":
                entries[tok.text] = self.block()
                continue
            items = []
            while self.peek().kind != ";":
                nxt = self.peek()
                if nxt.kind == "eof":
                    raise self.fail(nxt, f"';' after entry '{tok.text}'")
                if nxt.kind in ("}", ")", "]", "{"):
                    raise self.fail(nxt, f"';' after entry '{tok.text}'")
                items.append(self.item())
            self.take()
            entries[tok.text] = items[0] if len(items) == 1 else tuple(items)

    def block(self) -> dict:
        opener = self.take()
        entries, _ = self.body(opener)
        return entries

    def item(self) -> Any:
        tok = self.peek()
        if tok.kind == "word":
            self.take()
            num = _number(tok.text)
            return tok.text if num is None else num
        if tok.kind in ("string", "verbatim"):
            self.take()
            return tok.text
        if tok.kind == "[":
            self.take()
            values = []
            while self.peek().kind != "]":
                t = self.peek()
                if t.kind != "word":
                    raise self.fail(t, "']' closing dimension set")
                self.take()
                num = _number(t.text)
                values.append(t.text if num is None else num)
            self.take()
            return Dimensions(tuple(values))
        if tok.kind == "(":
            self.take()
            out = []
            while self.peek().kind != ")":
                t = self.peek()
                if t.kind == "eof":
                    raise self.fail(tok, f"')' to close the list opened at line {tok.line}")
                if t.kind == "{":
                    out.append(self.block())
                elif t.kind in ("}", "]", ";"):
                    raise self.fail(t, "')' or list item")
                else:
                    out.append(self.item())
            self.take()
            return out
        raise self.fail(tok, "value")


def parse(text: str, expected_name: str | None = None, path: str | None = None) -> DictionaryTree:
    """Parse dictionary source into a :class:`DictionaryTree`.

    When *expected_name* is given and the file carries a header, the header's
    ``object`` must match it.
    """
    parser = _Parser(_tokenize(text, path), path)
    entries, anonymous = parser.body(None)
    header = entries.pop("FoamFile", None)
    if header is not None and not isinstance(header, dict):
        raise ParseError(1, 1, "FoamFile header block", path)
    tree = DictionaryTree(header=header, entries=entries, anonymous=anonymous)
    if expected_name is not None and header is not None and tree.object_name != expected_name:
        raise ParseError(1, 1, f"header object {expected_name!r}, found {tree.object_name!r}", path)
    return tree


def _scalar(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _inline(v: Any) -> str | None:
    if isinstance(v, dict):
        return None
    if isinstance(v, (list, tuple)):
        parts = [_inline(x) for x in v]
        if any(p is None for p in parts):
            return None
        body = " ".join(parts)
        return f"({body})" if isinstance(v, list) else body
    if isinstance(v, Dimensions):
        return str(v)
    return _scalar(v)


def _write_dict(lines: list[str], entries: dict, ind: int) -> None:
    for key, value in entries.items():
        _write_entry(lines, key, value, ind)


def _write_list(lines: list[str], items: list, ind: int) -> None:
    pad = " " * ind
    lines.append(pad + "(")
    for x in items:
        if isinstance(x, dict):
            lines.append(pad + "    {")
            _write_dict(lines, x, ind + 8)
            lines.append(pad + "    }")
        else:
            inline = _inline(x)
            if inline is not None:
                lines.append(pad + "    " + inline)
            else:
                _write_list(lines, x, ind + 4)
    lines.append(pad + ")")


def _write_entry(lines: list[str], key: str, value: Any, ind: int) -> None:
    pad = " " * ind
    if isinstance(value, Directive):
        lines.append(pad + value.text)
        return
    if isinstance(value, dict):
        lines.append(pad + key)
        lines.append(pad + "{")
        _write_dict(lines, value, ind + 4)
        lines.append(pad + "}")
        return
    inline = _inline(value)
    if inline is not None:
        lines.append(f"{pad}{key};" if inline == "" else f"{pad}{key.ljust(15)} {inline};")
        return
    items = value if isinstance(value, tuple) else (value,)
    lines.append(pad + key)
    for x in items:
        text = _inline(x)
        if text is not None:
            lines[-1] += " " + text
        else:
            _write_list(lines, x, ind)
    lines[-1] += ";"


def serialize(tree: DictionaryTree) -> str:
    lines: list[str] = []
    if tree.header is not None:
        _write_entry(lines, "FoamFile", tree.header, 0)
        lines.append("")
    for key, value in tree.entries.items():
        _write_entry(lines, key, value, 0)
        lines.append("")
    for x in tree.anonymous:
        inline = _inline(x)
        if inline is not None:
            lines.append(inline)
        else:
            _write_list(lines, x, 0)
    return "\n".join(lines) + "\n"


def walk(value: Any, path: str = "") -> Iterator[tuple[str, Any]]:
    """Yield ``(path, value)`` for every value nested inside *value*."""
    yield path, value
    if isinstance(value, dict):
        for k, v in value.items():
            yield from walk(v, f"{path}/{k}" if path else k)
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from walk(v, f"{path}[{i}]")


# lint


@dataclass(frozen=True)
class Inconsistency:
    kind: str  # missing_field_reference | dimension_mismatch | solver_mismatch | boundary_patch_mismatch
    detail: str
    files: tuple[str, ...]


class LintReport(list):
    """List of :class:`Inconsistency` plus the parse errors met along the way."""

    def __init__(self, items: Iterable[Inconsistency] = (), parse_errors: Iterable[ParseError] = ()) -> None:
        super().__init__(items)
        self.parse_errors: list[ParseError] = list(parse_errors)


_CONSTRAINT_TYPES = {"empty", "wedge", "symmetry", "symmetryPlane", "cyclic", "cyclicAMI", "processor", "cyclicSlip"}


def is_dictionary_file(f: FoamFile) -> bool:
    top = f.folder_name.split("/", 1)[0]
    return top in ("system", "constant", "0") and not f.file_name.lower().endswith(_NON_DICT_SUFFIXES)


def _patches_from_list(items: Any) -> dict[str, str]:
    patches: dict[str, str] = {}
    if not isinstance(items, list):
        return patches
    if any(isinstance(x, dict) for x in items):
        for prev, cur in zip(items, items[1:]):
            if isinstance(cur, dict) and isinstance(prev, str):
                ptype = cur.get("type", "")
                patches[prev.strip('"')] = ptype if isinstance(ptype, str) else ""
        return patches
    for i in range(0, len(items) - 2, 3):
        ptype, name, faces = items[i], items[i + 1], items[i + 2]
        if isinstance(ptype, str) and isinstance(name, str) and isinstance(faces, list):
            patches[name] = ptype
    return patches


def mesh_patches(trees: dict[str, DictionaryTree]) -> tuple[dict[str, str], str | None]:
    """Return the mesh's patch name -> type map and the file it came from."""
    boundary = trees.get("constant/polyMesh/boundary")
    if boundary is not None:
        for item in boundary.anonymous:
            found = _patches_from_list(item)
            if found:
                return found, "constant/polyMesh/boundary"
    block = trees.get("system/blockMeshDict")
    if block is not None:
        found = _patches_from_list(block.entries.get("boundary", block.entries.get("patches")))
        default = block.entries.get("defaultPatch")
        if isinstance(default, dict) and isinstance(default.get("name"), str):
            found[default["name"]] = str(default.get("type", "empty"))
        if found:
            return found, "system/blockMeshDict"
    return {}, None


def _check_dimensions(key: str, tree: DictionaryTree) -> list[Inconsistency]:
    out = []
    for path, value in walk(tree.entries):
        if isinstance(value, Dimensions) and all(isinstance(v, (int, float)) for v in value.values):
            if len(value.values) != 7:
                out.append(Inconsistency(
                    "dimension_mismatch",
                    f"{key}: {path} has a {len(value.values)}-component dimension set {value}; expected 7",
                    (key,),
                ))
    return out


def _check_patches(key: str, tree: DictionaryTree, patches: dict[str, str], source: str) -> list[Inconsistency]:
    bf = tree.entries.get("boundaryField")
    if not isinstance(bf, dict):
        return []
    out = []
    covered: set[str] = set()
    constraint_include = False
    for name, value in bf.items():
        if isinstance(value, Directive):
            if "setConstraintTypes" in value.text:
                constraint_include = True
            continue
        if name.startswith('"'):
            pattern = name.strip('"')
            try:
                rx = re.compile(pattern)
            except re.error:
                continue
            covered.update(p for p in patches if rx.fullmatch(p))
            continue
        if name.startswith("$"):
            continue
        if name in patches:
            covered.add(name)
        else:
            out.append(Inconsistency(
                "boundary_patch_mismatch",
                f"{key} sets patch '{name}' which is not in the mesh boundary ({source})",
                (key, source),
            ))
    for patch, ptype in patches.items():
        if patch in covered or (constraint_include and ptype in _CONSTRAINT_TYPES):
            continue
        out.append(Inconsistency(
            "boundary_patch_mismatch",
            f"{key} has no boundaryField entry for mesh patch '{patch}' ({source})",
            (key, source),
        ))
    return out


def lint_case(
    files: list[FoamFile],
    descriptor: CaseDescriptor | None = None,
    boundary_names: Iterable[str] = (),
) -> LintReport:
    """Cross-file consistency checks over a generated case.

    Files that fail to parse are skipped and their errors collected on the
    returned report. *boundary_names* supplements the patch set when the mesh
    comes from outside the case (e.g. a converted ``.msh``).
    """
    trees: dict[str, DictionaryTree] = {}
    parse_errors: list[ParseError] = []
    for f in files:
        if not is_dictionary_file(f):
            continue
        try:
            trees[f.key] = parse(f.content, expected_name=f.file_name, path=f.key)
        except ParseError as exc:
            parse_errors.append(exc)

    found: list[Inconsistency] = []
    for key, tree in trees.items():
        found.extend(_check_dimensions(key, tree))

    patches, source = mesh_patches(trees)
    extra = [b for b in boundary_names if b not in patches]
    if extra:
        patches = {**patches, **{b: "" for b in extra}}
        source = source or "mesh boundary names"
    if patches:
        for key, tree in trees.items():
            if key.startswith("0/"):
                found.extend(_check_patches(key, tree, patches, source or ""))

    control = trees.get("system/controlDict")
    if descriptor is not None and control is not None:
        app = control.entries.get("application")
        if isinstance(app, str) and app.strip('"') != descriptor.case_solver:
            found.append(Inconsistency(
                "solver_mismatch",
                f"controlDict application '{app}' differs from planned solver '{descriptor.case_solver}'",
                ("system/controlDict",),
            ))

    fields = {f.file_name for f in files if f.folder_name == "0"}
    solution = trees.get("system/fvSolution")
    if fields and solution is not None:
        solvers = solution.entries.get("solvers")
        if isinstance(solvers, dict):
            for name in solvers:
                if not re.fullmatch(r"[A-Za-z_][A-Za-z0-9_.]*", name):
                    continue
                base = name[:-5] if name.endswith("Final") and len(name) > 5 else name
                if base not in fields:
                    found.append(Inconsistency(
                        "missing_field_reference",
                        f"fvSolution solves for '{base}' but 0/{base} is not part of the case",
                        ("system/fvSolution", file_key("0", base)),
                    ))
    return LintReport(found, parse_errors)
