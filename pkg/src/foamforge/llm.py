"""Completion/embedding backends, structured-output enforcement and token accounting."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any, Callable, Iterable, TypeVar, Union

import httpx
import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from .errors import ProviderFailure, SchemaViolation, ScriptExhausted
from .textnorm import tokenize

log = logging.getLogger(__name__)

T = TypeVar("T", bound=BaseModel)


@dataclass(frozen=True)
class CompletionRequest:
    system_prompt: str
    user_prompt: str
    temperature: float = 0.0
    schema_id: str | None = None
    template_id: str | None = None

    def digest(self) -> str:
        payload = json.dumps([self.system_prompt, self.user_prompt, self.temperature, self.schema_id])
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class CompletionResult:
    text: str
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def __post_init__(self) -> None:
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise ValueError("token counts must be non-negative")


def count_tokens(text: str) -> int:
    """Rough, deterministic token count (words and punctuation marks)."""
    return len(re.findall(r"\w+|[^\w\s]", text))


class Provider(ABC):
    embedding_dim: int = 1536

    @abstractmethod
    def complete(self, request: CompletionRequest) -> CompletionResult: ...

    @abstractmethod
    def embed(self, text: str) -> np.ndarray: ...


class HashEmbedder:
    """Deterministic feature-hashing embedder.

    Unigram and bigram features of the CFD-normalized token stream are hashed
    into signed buckets, so texts sharing vocabulary land close together. A
    small signature of the raw text is mixed in so that distinct texts never
    share a vector.
    """

    def __init__(self, dim: int = 1536, signature_weight: float = 0.05) -> None:
        self.dim = dim
        self.signature_weight = signature_weight

    def _bucket(self, feature: str) -> tuple[int, float]:
        h = int.from_bytes(hashlib.blake2b(feature.encode("utf-8"), digest_size=8).digest(), "little")
        return (h >> 1) % self.dim, (1.0 if h & 1 else -1.0)

    def __call__(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim, dtype=np.float64)
        toks = tokenize(text)
        for tok in toks:
            i, s = self._bucket(tok)
            vec[i] += s
        for a, b in zip(toks, toks[1:]):
            i, s = self._bucket(a + " " + b)
            vec[i] += 0.5 * s
        norm = np.linalg.norm(vec)
        if norm > 0:
            vec /= norm
        digest = hashlib.blake2b(text.encode("utf-8"), digest_size=48).digest()
        for k in range(0, 48, 6):
            i = int.from_bytes(digest[k:k + 4], "little") % self.dim
            v = (int.from_bytes(digest[k + 4:k + 6], "little") / 65535.0) * 2.0 - 1.0
            vec[i] += self.signature_weight * (v if abs(v) > 1e-3 else 1.0)
        return vec / np.linalg.norm(vec)

    embed = __call__


Response = Union[str, Callable[[CompletionRequest], str]]


class ScriptedProvider(Provider):
    """Replays canned responses in order and records every request.

    A response may be a string or a callable receiving the request. Embedding
    uses :class:`HashEmbedder`.
    """

    def __init__(self, responses: Iterable[Response] = (), embedding_dim: int = 1536) -> None:
        self._responses = list(responses)
        self._next = 0
        self._lock = threading.Lock()
        self.requests: list[CompletionRequest] = []
        self.embedding_dim = embedding_dim
        self._embedder = HashEmbedder(embedding_dim)

    def complete(self, request: CompletionRequest) -> CompletionResult:
        with self._lock:
            if self._next >= len(self._responses):
                raise ScriptExhausted(f"scripted provider has only {len(self._responses)} responses")
            response = self._responses[self._next]
            self._next += 1
            self.requests.append(request)
        text = response(request) if callable(response) else response
        return CompletionResult(
            text,
            prompt_tokens=count_tokens(request.system_prompt) + count_tokens(request.user_prompt),
            completion_tokens=count_tokens(text),
        )

    def embed(self, text: str) -> np.ndarray:
        return self._embedder(text)

    @property
    def remaining(self) -> int:
        return len(self._responses) - self._next


class OpenAICompatibleProvider(Provider):
    """Thin adapter for chat-completions / embeddings style HTTP APIs."""

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key_env: str = "OPENAI_API_KEY",
        embedding_model: str = "text-embedding-3-small",
        embedding_dim: int = 1536,
        timeout: float = 120.0,
        transport: httpx.BaseTransport | None = None,
    ) -> None:
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.embedding_model = embedding_model
        self.embedding_dim = embedding_dim
        headers = {}
        key = os.environ.get(api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)

    def _post(self, path: str, body: dict) -> dict:
        try:
            resp = self._client.post(f"{self.endpoint}{path}", json=body)
            resp.raise_for_status()
            return resp.json()
        except (httpx.HTTPError, ValueError) as exc:
            raise ProviderFailure(f"{path}: {exc}") from exc

    def complete(self, request: CompletionRequest) -> CompletionResult:
        data = self._post("/chat/completions", {
            "model": self.model,
            "temperature": request.temperature,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": request.user_prompt},
            ],
        })
        try:
            text = data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderFailure(f"malformed completion payload: {exc}") from exc
        usage = data.get("usage") or {}
        return CompletionResult(text, int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0)))

    def embed(self, text: str) -> np.ndarray:
        data = self._post("/embeddings", {"model": self.embedding_model, "input": text})
        try:
            return np.asarray(data["data"][0]["embedding"], dtype=np.float64)
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderFailure(f"malformed embedding payload: {exc}") from exc


def provider_from_settings(settings: dict) -> Provider:
    kind = settings.get("provider", "openai")
    if kind == "openai":
        return OpenAICompatibleProvider(
            endpoint=settings.get("endpoint", "https://api.openai.com/v1"),
            model=settings.get("model", "gpt-4o"),
            api_key_env=settings.get("api_key_env", "OPENAI_API_KEY"),
            embedding_model=settings.get("embedding_model", "text-embedding-3-small"),
            embedding_dim=int(settings.get("embedding_dim", 1536)),
        )
    raise ProviderFailure(f"unknown provider kind {kind!r}")


# structured output


class CaseDescriptionOut(BaseModel):
    model_config = ConfigDict(extra="ignore")

    case_name: str
    case_domain: str
    case_category: str
    case_solver: str


class Subtask(BaseModel):
    model_config = ConfigDict(extra="forbid")

    file_name: str
    folder_name: str


class SubtaskPlan(BaseModel):
    model_config = ConfigDict(extra="forbid")

    subtasks: list[Subtask]


class FoamFileOut(BaseModel):
    model_config = ConfigDict(extra="ignore")

    file_name: str
    folder_name: str
    content: str

    @field_validator("file_name", "content")
    @classmethod
    def _nonempty(cls, v: str) -> str:
        if not v.strip():
            raise ValueError("must be nonempty")
        return v


class FoamFileBatch(BaseModel):
    """Corrected files; accepts a bare JSON list as well as ``{"list_foamfile": [...]}``."""

    list_foamfile: list[FoamFileOut]

    @model_validator(mode="before")
    @classmethod
    def _wrap(cls, data: Any) -> Any:
        if isinstance(data, list):
            return {"list_foamfile": data}
        if isinstance(data, dict) and "list_foamfile" not in data and len(data) == 1:
            (value,) = data.values()
            if isinstance(value, list):
                return {"list_foamfile": value}
        return data


SCHEMAS: dict[str, type[BaseModel]] = {
    "case_description": CaseDescriptionOut,
    "subtasks": SubtaskPlan,
    "foamfiles": FoamFileBatch,
}

_FENCE = re.compile(r"```[A-Za-z0-9_+-]*[ \t]*\n?(.*?)```", re.S)


def strip_fences(text: str) -> str:
    """Return the body of the first fenced code block, or the stripped text."""
    match = _FENCE.search(text)
    return (match.group(1) if match else text).strip()


def parse_structured(text: str, schema: type[T]) -> T:
    body = strip_fences(text)
    try:
        return schema.model_validate_json(body)
    except ValidationError as exc:
        raise SchemaViolation(_short_error(exc), raw=text) from exc


def _short_error(exc: ValidationError) -> str:
    return "; ".join(
        f"{'.'.join(str(p) for p in e['loc']) or '<root>'}: {e['msg']}" for e in exc.errors(include_url=False)
    )


RETRY_SUFFIX = (
    "\n\nYour previous response could not be used: {error}\n"
    "Respond again with only valid JSON that satisfies the required schema."
)


def complete_structured(
    provider: Provider,
    request: CompletionRequest,
    schema: type[T],
    on_result: Callable[[CompletionRequest, CompletionResult], None] | None = None,
) -> T:
    """Complete *request* and validate the reply against *schema*.

    On a validation failure the request is repeated once with the error
    appended to the user prompt; a second failure raises SchemaViolation.
    """
    attempt = request
    for retry in range(2):
        try:
            result = provider.complete(attempt)
        except (ProviderFailure, ScriptExhausted):
            raise
        except Exception as exc:  # backend bugs surface as provider failures
            raise ProviderFailure(str(exc)) from exc
        if on_result is not None:
            on_result(attempt, result)
        try:
            return parse_structured(result.text, schema)
        except SchemaViolation as exc:
            if retry:
                raise
            log.info("schema %s rejected reply, re-prompting: %s", schema.__name__, exc)
            attempt = CompletionRequest(
                request.system_prompt,
                request.user_prompt + RETRY_SUFFIX.format(error=exc),
                request.temperature,
                request.schema_id,
                request.template_id,
            )
    raise AssertionError("unreachable")


class LLMGateway:
    """Provider wrapper that applies the configured temperature and meters tokens.

    *on_call* receives one dict per provider call (template, request digest,
    token counts); the workflow engine uses it to write trace events.
    """

    def __init__(
        self,
        provider: Provider,
        temperature: float = 0.0,
        on_call: Callable[[dict], None] | None = None,
    ) -> None:
        self.provider = provider
        self.temperature = temperature
        self.on_call = on_call
        self.prompt_tokens = 0
        self.completion_tokens = 0
        self.calls = 0
        self._lock = threading.Lock()

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens

    def _record(self, request: CompletionRequest, result: CompletionResult) -> None:
        with self._lock:
            self.prompt_tokens += result.prompt_tokens
            self.completion_tokens += result.completion_tokens
            self.calls += 1
        if self.on_call is not None:
            self.on_call({
                "template_id": request.template_id,
                "schema_id": request.schema_id,
                "request_hash": request.digest(),
                "prompt_tokens": result.prompt_tokens,
                "completion_tokens": result.completion_tokens,
            })

    def request(self, prompts: tuple[str, str], template_id: str, schema_id: str | None = None) -> CompletionRequest:
        system, user = prompts
        return CompletionRequest(system, user, self.temperature, schema_id, template_id)

    def complete(self, prompts: tuple[str, str], template_id: str) -> str:
        req = self.request(prompts, template_id)
        try:
            result = self.provider.complete(req)
        except (ProviderFailure, ScriptExhausted):
            raise
        except Exception as exc:
            raise ProviderFailure(str(exc)) from exc
        self._record(req, result)
        return result.text

    def complete_structured(self, prompts: tuple[str, str], template_id: str, schema_id: str) -> BaseModel:
        req = self.request(prompts, template_id, schema_id)
        return complete_structured(self.provider, req, SCHEMAS[schema_id], on_result=self._record)

    def embed(self, text: str) -> np.ndarray:
        return self.provider.embed(text)
