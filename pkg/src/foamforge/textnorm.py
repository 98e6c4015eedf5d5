"""CFD-aware tokenization shared by the embedders and the retrieval layer."""

from __future__ import annotations

import re

_UNIT_ATOM = r"(?:m|s|kg|K|Pa|N|J|W|mol)"
_UNIT_POWER = re.compile(rf"\b({_UNIT_ATOM})(-?\d)\b")
_UNIT_TOKEN = re.compile(rf"{_UNIT_ATOM}(?:\^-?\d)?(?:/{_UNIT_ATOM}(?:\^-?\d)?)+|{_UNIT_ATOM}\^-?\d", re.I)
_NUMBER = re.compile(r"\d+(?:\.\d+)?(?:[eE][+-]?\d+)?")
_RAW_TOKEN = re.compile(r"[A-Za-z0-9_.^/+-]+")
_CAMEL = re.compile(r"[A-Z]+(?=[A-Z][a-z])|[A-Z]?[a-z]+|[A-Z]+|\d+(?:\.\d+)?")


def normalize_units(text: str) -> str:
    """Write unit powers explicitly: ``m2/s`` -> ``m^2/s``, ``s-1`` -> ``s^-1``."""
    return _UNIT_POWER.sub(r"\1^\2", text)


def split_camel(word: str) -> list[str]:
    """``icoFoam`` -> ``["ico", "Foam"]``; ``kOmegaSST`` -> ``["k", "Omega", "SST"]``."""
    return _CAMEL.findall(word)


def tokenize(text: str) -> list[str]:
    """Lowercased tokens with camelCase compounds kept alongside their parts."""
    out: list[str] = []
    for raw in _RAW_TOKEN.findall(normalize_units(text)):
        raw = raw.strip("./+-")
        if not raw:
            continue
        if _UNIT_TOKEN.fullmatch(raw) or _NUMBER.fullmatch(raw):
            out.append(raw.lower())
            continue
        for piece in re.split(r"[_./^+-]+", raw):
            if not piece:
                continue
            parts = split_camel(piece)
            if len(parts) > 1:
                out.append(piece.lower())
            out.extend(p.lower() for p in parts)
    return out
