"""Exception types shared across the package.

Grouped here so modules can raise each other's error categories without
circular imports. Everything derives from TierBenchError; the CLI maps
ValidationError subclasses to exit code 1 and transport/IO problems to 2.
"""

from __future__ import annotations


class TierBenchError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(TierBenchError):
    """Bad inputs: schema violations, out-of-range values, unknown labels."""


class UnknownLabel(ValidationError):
    pass


class UnknownJournal(ValidationError):
    def __init__(self, name: str, candidates: list[str] | None = None):
        self.name = name
        self.candidates = candidates or []
        hint = f" (closest: {', '.join(self.candidates)})" if self.candidates else ""
        super().__init__(f"journal not in tier map: {name!r}{hint}")


class ChanceOutOfRange(ValidationError):
    pass


class SchemaError(ValidationError):
    """Malformed record. Carries the source line number when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class DuplicatePitchId(ValidationError):
    pass


class EmptyFile(ValidationError):
    pass


class OutOfRangeLikert(ValidationError):
    pass


class InsufficientTier(ValidationError):
    pass


class EmptyLogprobs(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class PolicyParamMissing(ValidationError):
    pass


class EmptyCounts(ValidationError):
    pass


class MissingConfidence(ValidationError):
    pass


class DegenerateSplit(ValidationError):
    pass


class InsufficientRatings(ValidationError):
    pass


class DegenerateMarginals(ValidationError):
    pass


class NoVariation(ValidationError):
    pass


class InsufficientData(ValidationError):
    pass


class EmptyPitch(ValidationError):
    pass


class InsufficientPairs(ValidationError):
    pass


class ForeignPitchId(ValidationError):
    pass


class UnknownPairId(ValidationError):
    pass


class GroupTooSmall(ValidationError):
    pass


class NonFiniteRatio(TierBenchError):
    pass


class WrongDiagnosticCount(ValidationError):
    pass


class TransportError(TierBenchError):
    """Retryable transport failure (timeouts, 5xx, rate-limit responses)."""


class AuthError(TierBenchError):
    """Authentication / schema rejection. Never retried."""


class NoLabelTokens(TierBenchError):
    """No candidate token at the label position matched any tier name."""


class PartialCollection(TierBenchError):
    """Some samples of a multi-sample request failed permanently.

    Carries what did succeed so callers can persist partial progress.
    """

    def __init__(self, missing: list[int], collected: dict[int, str] | None = None):
        self.missing = sorted(missing)
        self.collected = dict(collected or {})
        super().__init__(f"samples failed permanently: {self.missing}")
