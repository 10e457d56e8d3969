"""Error taxonomy shared across the package.

Every domain error derives from AprError so callers (and the CLI) can
catch one base class and map it to an exit code.
"""

from __future__ import annotations


class AprError(Exception):
    """Base class for all package-specific errors."""


class EmptySurface(AprError):
    """A surface form was empty after whitespace normalization."""


class EmptyText(AprError):
    """An input text was empty or whitespace-only."""


class DanglingId(AprError):
    """An entity, relation, edge, or run id is out of range."""


class DimensionMismatch(AprError):
    """Two vectors (or a vector and a codebook) disagree on dimension."""


class InvalidParams(AprError):
    """A parameter object failed validation."""


class EmptyRun(AprError):
    """A run with no edges was passed where members are required."""


class EmptyLines(AprError):
    """A fine-scoring call received no triple lines on one side."""


class NoTriplesFound(AprError):
    """A remote extractor returned a malformed or empty triple payload."""


class RemoteUnavailable(AprError):
    """A remote service failed after retries.

    `status` holds the last HTTP status code, or None for transport
    errors (connection refused, timeout).
    """

    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class MalformedPrompt(AprError):
    """A packed prompt could not be parsed back into a payload.

    `location` is a human-readable hint (line/column or key path).
    """

    def __init__(self, message: str, location: str = ""):
        super().__init__(message)
        self.location = location


class InvalidAliasMap(AprError):
    """An alias map is not a valid idempotent endomorphism on entity ids."""


class NonFiniteLoss(AprError):
    """Training produced a NaN or infinite loss."""


class SnapshotReadOnly(AprError):
    """A frozen codebook snapshot was asked to intern new symbols."""


class WorkspaceError(AprError):
    """A workspace is missing, locked, or structurally inconsistent."""


class IoError(AprError):
    """A file could not be read or written; message carries the path."""
