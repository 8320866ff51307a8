"""Exception hierarchy shared by every expflow module.

The CLI maps exception families onto exit codes: ``SpecError`` -> 2,
``RunError`` -> 1.
"""

from __future__ import annotations

from typing import Sequence


class ExpflowError(Exception):
    """Base class for all expflow errors."""


class SpecError(ExpflowError):
    """Problem with the experiment specification itself."""

    def __init__(self, message: str, span=None, source: str | None = None):
        super().__init__(message)
        self.message = message
        self.span = span
        self.source = source

    def __str__(self) -> str:
        if self.span is None:
            return self.message
        return f"line {self.span.line}, column {self.span.column}: {self.message}"


class ParseError(SpecError):
    def __init__(self, message: str, line: int, column: int, source: str | None = None):
        from expflow.spec.model import Span

        super().__init__(message, Span(line, column, line, column), source)
        self.line = line
        self.column = column


class DuplicateNameError(ParseError):
    pass


class ResolveError(SpecError):
    pass


class UnknownReferenceError(ResolveError):
    pass


class UnknownEnvError(ResolveError):
    pass


class CycleError(ResolveError):
    def __init__(self, members: Sequence[str], message: str | None = None, span=None):
        self.members = list(members)
        super().__init__(message or "cycle detected: " + " -> ".join(self.members), span)


class InterpolationTypeError(ResolveError, TypeError):
    pass


class ExtensionError(SpecError):
    pass


class DuplicateTypeError(ExtensionError):
    pass


class InvalidDescriptorError(ExtensionError):
    pass


class ManifestFormatError(ExtensionError):
    pass


class UnknownBehaviorBindingError(ExtensionError):
    pass


class GraphError(SpecError):
    pass


class UnknownStageRefError(GraphError):
    pass


class UnknownPipelineError(GraphError):
    pass


class MultipleProducersError(GraphError):
    pass


class StageDefinitionError(GraphError):
    pass


class ValidationError(SpecError):
    """Raised when a document carries error-severity diagnostics."""

    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        errors = [d for d in self.diagnostics if d.severity == "error"]
        super().__init__(f"{len(errors)} validation error(s)")


class TemplateError(SpecError):
    pass


class UnknownTemplateError(TemplateError):
    pass


class DestNotEmptyError(TemplateError):
    pass


class UnknownVariableError(TemplateError):
    pass


class RunError(ExpflowError):
    """Failure while executing stages or touching the workspace."""


class MissingInputError(RunError):
    def __init__(self, stage: str, paths: Sequence[str]):
        self.stage = stage
        self.paths = list(paths)
        super().__init__(f"stage {stage!r}: missing input(s): {', '.join(self.paths)}")


class SpawnError(RunError):
    pass


class EnvPrepareError(RunError):
    def __init__(self, message: str, log_path=None):
        super().__init__(message)
        self.log_path = log_path


class LockError(RunError):
    pass


class NotFoundError(RunError, FileNotFoundError):
    pass


class IoError(RunError, OSError):
    pass


class LedgerError(RunError):
    pass


class PipelineMismatchError(RunError):
    pass


class ServiceStartError(RunError):
    def __init__(self, service: str, reason: str = ""):
        self.service = service
        super().__init__(f"service {service!r} failed to start" + (f": {reason}" if reason else ""))


class StopTimeoutError(RunError):
    pass


class MissingBindingError(ExpflowError):
    pass


class InvalidMetricError(ExpflowError, ValueError):
    pass


class QueueFullError(ExpflowError):
    pass
