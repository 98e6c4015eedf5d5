"""Tutorial corpus ingestion and stage-aware multi-index retrieval."""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyCorpus, IndexNotBuilt
from .models import CaseDescriptor

KINDS = ("tutorial_structure", "tutorial_details", "execution_scripts", "command_documentation")
STAGE_INDEX = {
    "architect": "tutorial_structure",
    "input_writer": "tutorial_details",
    "runner": "execution_scripts",
    "command_help": "command_documentation",
}
CASE_FOLDERS = ("0", "constant", "system")
MAX_FILE_BYTES = 100_000

Embedder = Callable[[str], Sequence[float]]


@dataclass
class CaseRecord:
    metadata: CaseDescriptor
    path: str
    directory_structure: str
    file_contents: dict[str, str] = field(default_factory=dict)
    execution_script: str = ""

    def folders(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for rel in self.file_contents:
            folder, _, name = rel.rpartition("/")
            out.setdefault(folder, []).append(name)
        return {k: sorted(v) for k, v in sorted(out.items())}


def _application(control_text: str) -> str | None:
    m = re.search(r"^\s*application\s+([A-Za-z0-9_]+)\s*;", control_text, re.M)
    return m.group(1) if m else None


def _simulation_type(files: dict[str, str]) -> str | None:
    for rel in ("constant/momentumTransport", "constant/turbulenceProperties"):
        text = files.get(rel)
        if text:
            m = re.search(r"^\s*simulationType\s+([A-Za-z]+)\s*;", text, re.M)
            if m:
                return m.group(1)
    return None


def structure_listing(name: str, meta: CaseDescriptor, files: Iterable[str], has_allrun: bool) -> str:
    folders: dict[str, list[str]] = {}
    for rel in files:
        folder, _, fname = rel.rpartition("/")
        folders.setdefault(folder, []).append(fname)
    lines = [
        f"case name: {name}",
        f"case domain: {meta.case_domain}",
        f"case category: {meta.case_category}",
        f"case solver: {meta.case_solver}",
    ]
    for folder in sorted(folders):
        lines.append(f"{folder}/: {', '.join(sorted(folders[folder]))}")
    if has_allrun:
        lines.append("./: Allrun")
    return "\n".join(lines)


def _read_case(root: Path, case: Path) -> CaseRecord:
    files: dict[str, str] = {}
    for folder in CASE_FOLDERS:
        base = case / folder
        if not base.is_dir():
            continue
        for dirpath, dirnames, filenames in os.walk(base):
            dirnames[:] = sorted(d for d in dirnames if d != "polyMesh")
            for fname in sorted(filenames):
                p = Path(dirpath) / fname
                if p.stat().st_size > MAX_FILE_BYTES:
                    continue
                try:
                    files[p.relative_to(case).as_posix()] = p.read_text("utf-8")
                except UnicodeDecodeError:
                    continue
    allrun = case / "Allrun"
    script = allrun.read_text("utf-8") if allrun.is_file() else ""

    rel_parts = case.relative_to(root).parts
    meta = {
        "case_name": case.name,
        "case_domain": rel_parts[0] if len(rel_parts) > 1 else "unknown",
        "case_category": _simulation_type(files) or "none",
        "case_solver": _application(files.get("system/controlDict", ""))
        or (rel_parts[-2] if len(rel_parts) > 1 else "unknown"),
    }
    override = case / "case_meta.json"
    if override.is_file():
        meta.update(json.loads(override.read_text("utf-8")))
    descriptor = CaseDescriptor(**meta)
    return CaseRecord(
        metadata=descriptor,
        path=case.relative_to(root).as_posix(),
        directory_structure=structure_listing(case.name, descriptor, files, bool(script)),
        file_contents=files,
        execution_script=script,
    )


def ingest_corpus(root_path: str | os.PathLike) -> list[CaseRecord]:
    """One record per case directory (a directory holding ``system/``) below *root_path*."""
    root = Path(root_path)
    records = []
    if root.is_dir():
        for dirpath, dirnames, _ in os.walk(root):
            dirnames.sort()
            if "system" in dirnames and (Path(dirpath) / "system").is_dir():
                records.append(_read_case(root, Path(dirpath)))
                dirnames[:] = []
    if not records:
        raise EmptyCorpus(f"no case directories under {root}")
    return records


def load_command_docs(path: str | os.PathLike | None = None) -> dict[str, str]:
    """Parse the command-help corpus: ``### name`` headings followed by help text."""
    if path is None:
        text = resources.files("foamforge").joinpath("data/command_help.txt").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    docs: dict[str, str] = {}
    for block in re.split(r"^### ", text, flags=re.M)[1:]:
        name, _, body = block.partition("\n")
        docs[name.strip()] = body.strip()
    return docs


@dataclass
class VectorIndex:
    kind: str
    vectors: np.ndarray
    payloads: list[dict]

    def __len__(self) -> int:
        return len(self.payloads)


@dataclass
class IndexSet:
    embedding_dim: int
    indices: dict[str, VectorIndex]

    def __getitem__(self, kind: str) -> VectorIndex:
        return self.indices[kind]

    def merged(self) -> VectorIndex:
        vectors = np.vstack([self.indices[k].vectors for k in KINDS])
        payloads = [p for k in KINDS for p in self.indices[k].payloads]
        return VectorIndex("merged", vectors, payloads)

    def save(self, directory: str | os.PathLike) -> Path:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        manifest = {"format": 1, "embedding_dim": self.embedding_dim, "indices": {}}
        for kind in KINDS:
            idx = self.indices[kind]
            (out / f"{kind}.f64").write_bytes(np.ascontiguousarray(idx.vectors, dtype="<f8").tobytes())
            (out / f"{kind}.payloads.json").write_text(
                json.dumps(idx.payloads, indent=1, sort_keys=True), encoding="utf-8")
            manifest["indices"][kind] = {
                "count": len(idx),
                "dim": self.embedding_dim,
                "vectors": f"{kind}.f64",
                "payloads": f"{kind}.payloads.json",
            }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
        return out

    @classmethod
    def load(cls, directory: str | os.PathLike) -> IndexSet:
        base = Path(directory)
        manifest = json.loads((base / "manifest.json").read_text("utf-8"))
        dim = manifest["embedding_dim"]
        indices = {}
        for kind, entry in manifest["indices"].items():
            raw = np.frombuffer((base / entry["vectors"]).read_bytes(), dtype="<f8")
            vectors = raw.reshape(entry["count"], dim).astype(np.float64)
            payloads = json.loads((base / entry["payloads"]).read_text("utf-8"))
            indices[kind] = VectorIndex(kind, vectors, payloads)
        return cls(dim, indices)


def _embed_all(texts: list[str], embedder: Embedder, dim: int) -> np.ndarray:
    if not texts:
        return np.zeros((0, dim), dtype=np.float64)
    rows = []
    for t in texts:
        v = np.asarray(embedder(t), dtype=np.float64)
        if v.shape != (dim,):
            raise DimensionMismatch(f"embedder returned shape {v.shape}, expected ({dim},)")
        rows.append(v)
    return np.vstack(rows)


def _meta_line(rec: CaseRecord) -> str:
    m = rec.metadata
    return f"{m.case_name} {m.case_domain} {m.case_category} {m.case_solver}"


def build_index_set(
    records: list[CaseRecord],
    embedder: Embedder,
    embedding_dim: int = 1536,
    command_docs: dict[str, str] | None = None,
) -> IndexSet:
    if command_docs is None:
        command_docs = load_command_docs()
    texts: dict[str, list[str]] = {k: [] for k in KINDS}
    payloads: dict[str, list[dict]] = {k: [] for k in KINDS}
    for rec in records:
        base = {"case_name": rec.metadata.case_name, "case_path": rec.path, **rec.metadata.model_dump()}
        texts["tutorial_structure"].append(rec.directory_structure)
        payloads["tutorial_structure"].append({
            **base, "kind": "tutorial_structure", "text": rec.directory_structure, "folders": rec.folders(),
        })
        for rel, content in rec.file_contents.items():
            texts["tutorial_details"].append(f"{_meta_line(rec)} {rel}\n{content}")
            payloads["tutorial_details"].append({**base, "kind": "tutorial_details", "file": rel, "text": content})
        texts["execution_scripts"].append(f"{_meta_line(rec)}\n{rec.execution_script}")
        payloads["execution_scripts"].append({**base, "kind": "execution_scripts", "text": rec.execution_script})
    for name, body in command_docs.items():
        texts["command_documentation"].append(f"{name}\n{body}")
        payloads["command_documentation"].append({"kind": "command_documentation", "command": name, "text": body})
    indices = {k: VectorIndex(k, _embed_all(texts[k], embedder, embedding_dim), payloads[k]) for k in KINDS}
    return IndexSet(embedding_dim, indices)


@dataclass(frozen=True)
class Match:
    payload: dict
    score: float


@dataclass
class RetrievalResult:
    matches: list[Match]
    formatted_context: str

    @property
    def top(self) -> Match | None:
        return self.matches[0] if self.matches else None


def cosine_rank(vectors: np.ndarray, query: np.ndarray, k: int, mask: np.ndarray | None = None) -> list[tuple[int, float]]:
    """Exact top-*k* by cosine similarity; ties keep index order."""
    if len(vectors) == 0:
        return []
    norms = np.linalg.norm(vectors, axis=1) * np.linalg.norm(query)
    with np.errstate(invalid="ignore", divide="ignore"):
        scores = np.where(norms > 0, (vectors @ query) / norms, 0.0)
    scores = np.clip(scores, -1.0, 1.0)
    candidates = np.arange(len(vectors))
    if mask is not None:
        candidates = candidates[mask]
    order = candidates[np.lexsort((candidates, -scores[candidates]))]
    return [(int(i), float(scores[i])) for i in order[:k]]


def _dedupe_key(payload: dict) -> str:
    return payload.get("case_path") or payload.get("command") or payload.get("text", "")


def filter_by_relevance(matches: list[Match], threshold: float, context: str = "") -> list[Match]:
    """Drop weak matches, repeats of a case already kept, and text already in *context*."""
    kept, seen = [], set()
    for m in matches:
        if m.score < threshold:
            continue
        key = _dedupe_key(m.payload)
        if key in seen:
            continue
        if context and m.payload.get("text") and m.payload["text"] in context:
            continue
        seen.add(key)
        kept.append(m)
    return kept


def format_match(payload: dict) -> str:
    kind = payload["kind"]
    if kind == "tutorial_structure":
        return f"<similar_case path=\"{payload['case_path']}\">\n{payload['text']}\n</similar_case>"
    if kind == "tutorial_details":
        return (f"<similar_file case=\"{payload['case_path']}\" file=\"{payload['file']}\">\n"
                f"{payload['text']}\n</similar_file>")
    if kind == "execution_scripts":
        return f"<similar_allrun case=\"{payload['case_path']}\">\n{payload['text']}\n</similar_allrun>"
    return f"{payload['command']}: {payload['text']}"


def format_context(matches: list[Match]) -> str:
    return "\n\n".join(format_match(m.payload) for m in matches)


class KnowledgeIndex:
    """Built index set plus the embedder and retrieval parameters that query it."""

    def __init__(
        self,
        embedder: Embedder,
        index_set: IndexSet | None = None,
        top_k: int = 5,
        relevance_threshold: float = 0.2,
    ) -> None:
        self.embedder = embedder
        self.index_set = index_set
        self.top_k = top_k
        self.relevance_threshold = relevance_threshold
        self.calls: list[tuple[str, str]] = []

    def build(self, records: list[CaseRecord], embedding_dim: int = 1536,
              command_docs: dict[str, str] | None = None) -> KnowledgeIndex:
        self.index_set = build_index_set(records, self.embedder, embedding_dim, command_docs)
        return self

    def _query(self, query: str) -> np.ndarray:
        if self.index_set is None:
            raise IndexNotBuilt("build or load an index set before retrieving")
        q = np.asarray(self.embedder(query), dtype=np.float64)
        if q.shape != (self.index_set.embedding_dim,):
            raise DimensionMismatch(f"query embedding shape {q.shape}")
        return q

    def _search(self, index: VectorIndex, query: str, context: str, top_k: int | None,
                min_score: float | None, restrict_cases: Iterable[str] | None) -> RetrievalResult:
        q = self._query(query)
        mask = None
        if restrict_cases is not None:
            allowed = set(restrict_cases)
            mask = np.array([p.get("case_path") in allowed for p in index.payloads], dtype=bool)
        ranked = cosine_rank(index.vectors, q, top_k or self.top_k, mask)
        matches = [Match(index.payloads[i], s) for i, s in ranked]
        threshold = self.relevance_threshold if min_score is None else min_score
        kept = filter_by_relevance(matches, threshold, context)
        return RetrievalResult(kept, format_context(kept))

    def retrieve(self, query: str, stage: str, context: str = "", top_k: int | None = None,
                 min_score: float | None = None, restrict_cases: Iterable[str] | None = None) -> RetrievalResult:
        if stage not in STAGE_INDEX:
            raise ValueError(f"unknown retrieval stage {stage!r}")
        if self.index_set is None:
            raise IndexNotBuilt("build or load an index set before retrieving")
        self.calls.append((stage, query))
        return self._search(self.index_set[STAGE_INDEX[stage]], query, context, top_k, min_score, restrict_cases)

    def retrieve_single_index(self, query: str, context: str = "", top_k: int | None = None,
                              min_score: float | None = None) -> RetrievalResult:
        """Baseline retrieval over one merged index holding every payload kind."""
        if self.index_set is None:
            raise IndexNotBuilt("build or load an index set before retrieving")
        self.calls.append(("single_index", query))
        return self._search(self.index_set.merged(), query, context, top_k, min_score, None)


def bundled_corpus_root() -> Path:
    return Path(str(resources.files("foamforge").joinpath("data/corpus")))
