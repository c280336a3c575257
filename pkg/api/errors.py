"""Exception hierarchy shared by the models, services, CLI and HTTP layer."""

from typing import Optional


class ReportEngineError(Exception):
    """Base class for every failure raised by the report engine."""


class InvalidParameterError(ReportEngineError, ValueError):
    """Shapes, dimensions or values that violate an operation's contract."""


class PreconditionError(ReportEngineError, ValueError):
    """A documented precondition of an operation does not hold."""


class StageError(ReportEngineError, ValueError):
    """A feature was used in the wrong stage (e.g. projected twice)."""


class IndexDegenerateError(ReportEngineError, ValueError):
    """One polarity class of the context index is empty."""


class RetrievalUnderflowError(ReportEngineError, ValueError):
    """Not enough context samples of one polarity to satisfy a request."""


class ContextLengthError(ReportEngineError, ValueError):
    """A sequence does not fit in the decoder's context window."""


class DegenerateBatchError(ReportEngineError, ValueError):
    """A batch has no report positions to train on."""


class DegenerateIdfError(ReportEngineError, ValueError):
    """Document frequencies are undefined for a corpus of this size."""


class ManifestValidationError(ReportEngineError, ValueError):
    """A manifest parsed cleanly but violates a record invariant."""


class ManifestParseError(ReportEngineError, ValueError):
    """A manifest line could not be parsed."""

    def __init__(self, message: str, line_number: Optional[int] = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class CheckpointFormatError(ReportEngineError, ValueError):
    """A checkpoint file is truncated, has a bad magic or an unknown version."""


class DiagnosticError(ReportEngineError, RuntimeError):
    """A numerical diagnostic (e.g. a gradient check) could not be evaluated."""


class TrainingDivergedError(ReportEngineError, RuntimeError):
    """The training loss became non-finite."""

    def __init__(self, message: str, epoch: int, step: int):
        self.epoch = epoch
        self.step = step
        super().__init__(f"{message} (epoch {epoch}, step {step})")
