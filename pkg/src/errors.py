"""Exception types shared across the optimizer package."""

from __future__ import annotations


class RagOptError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(RagOptError):
    """Invalid configuration or command-line usage (CLI exit code 2)."""

    def __init__(self, message: str, problems: list[str] | None = None):
        self.problems = problems or []
        if self.problems:
            message = message + "\n" + "\n".join(f"  - {p}" for p in self.problems)
        super().__init__(message)


class PreconditionError(RagOptError, ValueError):
    """An operation was called with inputs that violate its precondition."""


class ContractError(RagOptError):
    """Two inputs that must agree (e.g. query ids) do not."""


class TemplateError(ConfigError):
    """A prompt template is missing a placeholder or repeats one."""


class CorpusFormatError(RagOptError):
    """A corpus or QA file line could not be parsed or violates an invariant."""

    def __init__(self, message: str, line_number: int | None = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class LLMError(RagOptError):
    """An endpoint call failed for good."""

    def __init__(self, message: str, endpoint: str = "", status: int | None = None):
        self.endpoint = endpoint
        self.status = status
        super().__init__(message)


class RetryableLLMError(LLMError):
    """A transport failure worth retrying (connection error, 429, 5xx)."""


class CapabilityError(ConfigError):
    """The configured endpoint lacks a feature the module needs."""


class NodeFailure(RagOptError):
    """Every candidate of a node was disqualified or filtered out."""

    def __init__(self, node_name: str, reason: str):
        self.node_name = node_name
        super().__init__(f"node '{node_name}' failed: {reason}")
