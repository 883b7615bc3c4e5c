"""Exception hierarchy. Everything the CLI maps to exit code 1 derives from
:class:`PipelineError`."""

from __future__ import annotations


class PipelineError(Exception):
    pass


class InvalidConversation(PipelineError):
    def __init__(self, message: str, violations=()):
        super().__init__(message)
        self.violations = list(violations)


class TemplateError(PipelineError):
    pass


class ConfigError(PipelineError):
    pass


# gateway


class GatewayError(PipelineError):
    pass


class TransportError(GatewayError):
    pass


class ProtocolError(GatewayError):
    pass


class RateLimited(GatewayError):
    pass


class AuthError(GatewayError):
    pass


class ExhaustedScript(GatewayError):
    pass


class ScriptParseError(ConfigError):
    def __init__(self, path, lineno: int, reason: str):
        super().__init__(f"{path}:{lineno}: {reason}")
        self.lineno = lineno


# generation / labelling


class EmptyGeneration(PipelineError):
    pass


class EmptyGuess(EmptyGeneration):
    pass


class InsufficientHistory(PipelineError):
    pass


class UnparseableJudgment(PipelineError):
    pass


class MissingLabels(PipelineError):
    pass


class NoRating(PipelineError):
    pass


class OutOfRange(PipelineError):
    pass
