"""Exception hierarchy shared across foamforge modules."""

from __future__ import annotations


class FoamForgeError(Exception):
    """Base class for every error raised by foamforge."""


class ConfigError(FoamForgeError, ValueError):
    pass


class ScriptExhausted(FoamForgeError):
    """A scripted provider or fake executor ran out of canned responses."""


# case-model


class DescriptorError(FoamForgeError, ValueError):
    """A case descriptor failed validation."""


class UnknownVocabularyTerm(DescriptorError):
    def __init__(self, field: str, value: str) -> None:
        super().__init__(f"{field}={value!r} is not in the configured vocabulary")
        self.field = field
        self.value = value


class CyclicDependency(FoamForgeError):
    def __init__(self, cycle: list[str]) -> None:
        super().__init__("cyclic file dependency: " + " -> ".join(cycle))
        self.cycle = cycle


# foam-dict


class ParseError(FoamForgeError, ValueError):
    def __init__(self, line: int, column: int, expected: str, path: str | None = None) -> None:
        where = f"{path}:" if path else ""
        super().__init__(f"{where}{line}:{column}: expected {expected}")
        self.line = line
        self.column = column
        self.expected = expected
        self.path = path


# knowledge-index


class EmptyCorpus(FoamForgeError):
    pass


class DimensionMismatch(FoamForgeError, ValueError):
    pass


class IndexNotBuilt(FoamForgeError):
    pass


# llm-gateway


class ProviderFailure(FoamForgeError):
    pass


class SchemaViolation(FoamForgeError):
    def __init__(self, message: str, raw: str = "") -> None:
        super().__init__(message)
        self.raw = raw


# prompt-library


class UnknownTemplate(FoamForgeError, KeyError):
    def __str__(self) -> str:
        return f"unknown template {self.args[0]!r}"


class MissingSlot(FoamForgeError, KeyError):
    def __init__(self, name: str, template_id: str = "") -> None:
        super().__init__(name)
        self.name = name
        self.template_id = template_id

    def __str__(self) -> str:
        return f"template {self.template_id!r} requires slot {self.name!r}"


# agents


class EmptyPlan(FoamForgeError):
    pass


class EmptyCorrection(FoamForgeError):
    pass


class ReviewPreconditionError(FoamForgeError):
    pass


class MissingAccount(FoamForgeError, ValueError):
    pass


class VisualizationExhausted(FoamForgeError):
    def __init__(self, attempts: int) -> None:
        super().__init__(f"visualization failed after {attempts} attempts")
        self.attempts = attempts


# execution


class ExecutorFailure(FoamForgeError):
    def __init__(self, message: str, logs: dict[str, str] | None = None) -> None:
        super().__init__(message)
        self.logs = logs or {}


class ExecutionDisabled(ExecutorFailure):
    pass


class Timeout(ExecutorFailure):
    def __init__(self, budget: float, logs: dict[str, str] | None = None) -> None:
        super().__init__(f"run exceeded its {budget:g}s budget", logs)
        self.budget = budget


class SpawnFailure(ExecutorFailure):
    pass


# mcp-service


class UnknownJob(FoamForgeError, KeyError):
    def __str__(self) -> str:
        return f"unknown job {self.args[0]!r}"


class UnknownCase(FoamForgeError, KeyError):
    def __str__(self) -> str:
        return f"unknown case {self.args[0]!r}"


class UnknownTool(FoamForgeError, KeyError):
    def __str__(self) -> str:
        return f"unknown tool {self.args[0]!r}"
