"""Typed error hierarchy shared by all lexgrid modules."""


class LexgridError(Exception):
    """Base class for all domain errors raised by this package."""


class EmptyDocument(LexgridError):
    """Raw text of a document source is empty or whitespace-only."""

    def __init__(self, source_id: str = ""):
        self.source_id = source_id
        super().__init__(f"empty document: {source_id!r}" if source_id else "empty document")


class DuplicateSourceId(LexgridError):
    def __init__(self, source_id: str):
        self.source_id = source_id
        super().__init__(f"duplicate source_id: {source_id!r}")


class InvalidDocument(LexgridError):
    """A document source violates a metadata invariant."""


class DimensionMismatch(LexgridError):
    def __init__(self, expected: int, got: int):
        self.expected = expected
        self.got = got
        super().__init__(f"expected dimension {expected}, got {got}")


class ZeroVector(LexgridError):
    """A vector with zero norm was supplied where a direction is required."""


class BackendUnavailable(LexgridError):
    """A model backend could not be reached after the configured retries."""


class BackendTimeout(BackendUnavailable):
    """A model backend did not answer within the configured timeout."""


class UnscriptedPrompt(LexgridError):
    """A scripted backend in strict mode received a prompt it has no reply for."""

    def __init__(self, digest: str):
        self.digest = digest
        super().__init__(f"no scripted reply for prompt digest {digest}")


class EmptyCompletion(LexgridError):
    """A backend returned an empty completion."""


class NoPassingContext(LexgridError):
    """Generation was requested without any context that passed grading."""


class LengthMismatch(LexgridError):
    def __init__(self, expected: int, got: int):
        super().__init__(f"prediction/gold length mismatch: {expected} vs {got}")


class MissingGold(LexgridError):
    """Gold labels do not cover the requested evaluation scope."""

    def __init__(self, missing_keys):
        self.missing_keys = list(missing_keys)
        super().__init__(f"missing gold labels for: {self.missing_keys}")


class IndexMissing(LexgridError):
    """A vector index was required but has not been built or loaded."""


class MalformedTrace(LexgridError):
    """A trace document cannot be interpreted at all (audit cannot proceed)."""
