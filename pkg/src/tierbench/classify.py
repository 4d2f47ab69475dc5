"""Turning raw model output into tier predictions.

Two routes:

* log-prob route: read the log-probabilities assigned to the four tier
  labels at the answer position and softmax over exactly those four.
* sampled route: parse each of several generated texts to a label (or
  Unresolved) and aggregate counts per pitch.

Unresolved is a value, not an error: it stays in denominators but never
counts toward a majority.
"""

from __future__ import annotations

import math
import string
from collections import Counter
from dataclasses import dataclass

from .errors import EmptyLogprobs, LengthMismatch
from .tiers import TIER_ORDER, Tier


@dataclass(frozen=True)
class LabelDistribution:
    """Probability over the four tiers; must sum to 1 within 1e-9."""

    probabilities: tuple[float, float, float, float]  # tier-code order

    def __post_init__(self):
        if len(self.probabilities) != 4:
            raise LengthMismatch("distribution needs exactly four probabilities")
        total = sum(self.probabilities)
        if not math.isclose(total, 1.0, rel_tol=0.0, abs_tol=1e-9):
            raise LengthMismatch(f"probabilities sum to {total!r}, not 1")
        if any(p < 0 for p in self.probabilities):
            raise LengthMismatch("probabilities must be non-negative")

    def prob(self, tier: Tier) -> float:
        return self.probabilities[int(tier) - 1]

    def as_dict(self) -> dict[Tier, float]:
        return {t: self.probabilities[int(t) - 1] for t in TIER_ORDER}

    @classmethod
    def from_dict(cls, probs: dict[Tier, float]) -> "LabelDistribution":
        return cls(tuple(probs.get(t, 0.0) for t in TIER_ORDER))

    def argmax(self) -> tuple[Tier, bool]:
        """Most probable tier; ties resolve to the lowest code. Second value
        reports whether a tie was actually broken."""
        best = max(self.probabilities)
        winners = [t for t, p in zip(TIER_ORDER, self.probabilities) if p == best]
        return winners[0], len(winners) > 1


@dataclass(frozen=True)
class Prediction:
    pitch_id: str
    label: Tier
    distribution: LabelDistribution
    confidence: float  # max probability
    tie_broken: bool


def classify_logprob(label_logprobs: dict[Tier, float], pitch_id: str = "") -> Prediction:
    """Softmax the four label log-probs and take the argmax.

    Tiers absent from the input get probability exactly 0 (log-prob -inf).
    An exact probability tie resolves to the lowest tier code and sets
    tie_broken.
    """
    if not label_logprobs:
        raise EmptyLogprobs("no tier log-probabilities supplied")
    lps = [label_logprobs.get(t, -math.inf) for t in TIER_ORDER]
    peak = max(lps)
    if peak == -math.inf:
        raise EmptyLogprobs("all tier log-probabilities are -inf")
    # shift by the max so exp never overflows
    weights = [math.exp(lp - peak) if lp > -math.inf else 0.0 for lp in lps]
    total = sum(weights)
    dist = LabelDistribution(tuple(w / total for w in weights))
    label, tie_broken = dist.argmax()
    return Prediction(pitch_id=pitch_id, label=label, distribution=dist,
                      confidence=dist.prob(label), tie_broken=tie_broken)


_MARKDOWN_CHARS = "*_`#>~"
_STRIP_CHARS = string.whitespace + string.punctuation


def parse_label_text(raw: str) -> Tier | None:
    """Strict whole-string label parse; None means Unresolved.

    Markdown emphasis, surrounding whitespace, and surrounding punctuation
    are stripped, the remainder lowercased, and the result must equal one
    of the four tier names exactly. Sentences that merely contain a tier
    name do not resolve.
    """
    cleaned = raw
    for ch in _MARKDOWN_CHARS:
        cleaned = cleaned.replace(ch, "")
    cleaned = cleaned.strip(_STRIP_CHARS).lower()
    for tier in TIER_ORDER:
        if cleaned == tier.label:
            return tier
    return None


@dataclass(frozen=True)
class RunAggregate:
    """Per-pitch tally over repeated sampled runs."""

    pitch_id: str
    n_runs: int
    n_correct: int
    majority: Tier | None  # None when the top count is tied or nothing resolved
    tied: bool

    def fraction_correct(self) -> float:
        return self.n_correct / self.n_runs


def runs_majority(parsed_runs: list[Tier | None]) -> tuple[Tier | None, bool]:
    """Strict plurality over resolved runs; (None, True) when tied or empty."""
    counts = Counter(r for r in parsed_runs if r is not None)
    if not counts:
        return None, True
    top = max(counts.values())
    winners = sorted(t for t, c in counts.items() if c == top)
    if len(winners) > 1:
        return None, True
    return winners[0], False


def aggregate_runs(parsed_runs: list[Tier | None], truth: Tier,
                   pitch_id: str = "") -> RunAggregate:
    """Count correct runs and take the strict-plurality label.

    Unresolved runs stay in n_runs (the fixed denominator) but are not
    counted toward any label. The majority is absent exactly when the top
    resolved count is shared, or when no run resolved at all.
    """
    if not parsed_runs:
        raise LengthMismatch("need at least one run")
    n_correct = sum(1 for r in parsed_runs if r == truth)
    majority, tied = runs_majority(parsed_runs)
    return RunAggregate(pitch_id, len(parsed_runs), n_correct, majority, tied)


def pitch_mean_accuracy(aggregates: list[RunAggregate]) -> float:
    """Mean over pitches of per-pitch fraction correct."""
    if not aggregates:
        raise LengthMismatch("no aggregates")
    return sum(a.fraction_correct() for a in aggregates) / len(aggregates)


def majority_accuracy(aggregates: list[RunAggregate],
                      truths: dict[str, Tier]) -> tuple[float, int]:
    """Majority-vote accuracy over non-tied pitches, with the effective N."""
    scored = [(a.majority == truths[a.pitch_id]) for a in aggregates if not a.tied]
    if not scored:
        return 0.0, 0
    return sum(scored) / len(scored), len(scored)
