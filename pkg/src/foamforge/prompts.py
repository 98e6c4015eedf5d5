"""Prompt templates loaded from a directory of text files and rendered by slot name."""

from __future__ import annotations

import json
import os
import string
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping

from .errors import MissingSlot, UnknownTemplate

_FORMATTER = string.Formatter()


def slot_names(text: str) -> frozenset[str]:
    """Names of the ``{name}`` slots in *text*; ``{{`` and ``}}`` are literal braces."""
    return frozenset(name for _, name, _, _ in _FORMATTER.parse(text) if name)


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    system_text: str
    user_text: str
    reconstructed: bool = False

    @property
    def required_slots(self) -> frozenset[str]:
        return slot_names(self.system_text) | slot_names(self.user_text)


class _Slots(dict):
    def __init__(self, values: Mapping[str, object], template_id: str) -> None:
        super().__init__((k, str(v)) for k, v in values.items())
        self.template_id = template_id

    def __missing__(self, key: str) -> str:
        raise MissingSlot(key, self.template_id)


class PromptLibrary:
    """Read-only template pack.

    A pack is a directory holding ``<id>.system.txt`` and/or ``<id>.user.txt``
    per template plus an optional ``manifest.json`` that marks templates
    written without a printed original as ``reconstructed``.
    """

    def __init__(self, templates: Mapping[str, PromptTemplate]) -> None:
        self._templates = dict(templates)

    @classmethod
    def load(cls, directory: str | os.PathLike | None = None) -> PromptLibrary:
        root = Path(directory) if directory else Path(str(resources.files("foamforge").joinpath("data/templates")))
        manifest_path = root / "manifest.json"
        manifest = json.loads(manifest_path.read_text("utf-8")) if manifest_path.exists() else {}
        parts: dict[str, dict[str, str]] = {}
        for path in sorted(root.glob("*.txt")):
            stem = path.name[: -len(".txt")]
            template_id, _, role = stem.rpartition(".")
            if role not in ("system", "user") or not template_id:
                continue
            parts.setdefault(template_id, {})[role] = path.read_text("utf-8")
        templates = {
            tid: PromptTemplate(
                tid,
                texts.get("system", ""),
                texts.get("user", ""),
                bool(manifest.get(tid, {}).get("reconstructed", False)),
            )
            for tid, texts in parts.items()
        }
        return cls(templates)

    def ids(self) -> list[str]:
        return sorted(self._templates)

    def get(self, template_id: str) -> PromptTemplate:
        try:
            return self._templates[template_id]
        except KeyError:
            raise UnknownTemplate(template_id) from None

    def render(self, template_id: str, slots: Mapping[str, object]) -> tuple[str, str]:
        """Return ``(system_prompt, user_prompt)`` with every slot substituted.

        Extra slots are ignored; a missing one raises MissingSlot.
        """
        template = self.get(template_id)
        values = _Slots(slots, template_id)
        return template.system_text.format_map(values), template.user_text.format_map(values)


_DEFAULT: PromptLibrary | None = None


def default_library() -> PromptLibrary:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = PromptLibrary.load()
    return _DEFAULT
