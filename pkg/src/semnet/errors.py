"""Typed errors shared across the package."""


class SemnetError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(SemnetError):
    """Rejected input: tensor dimensions incompatible with the operation."""


class ContractViolation(SemnetError):
    """A documented precondition was violated by the caller."""


class NumericalFault(SemnetError):
    """A non-finite value appeared mid-computation."""

    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message)
        self.layer = layer


class TrainingFault(SemnetError):
    """Training diverged or collapsed; carries the offending epoch/step."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


class CheckpointError(SemnetError):
    """Checkpoint container is malformed, truncated, or unsupported."""


class DataFormatError(SemnetError):
    """Dataset file is malformed; carries the byte offset where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message)
        self.offset = offset


class ConfigError(SemnetError):
    """Experiment configuration is invalid (unknown key, bad value, bad kind)."""
