"""Combining evaluators: probability ensembles, votes, consensus filters.

The consensus prediction for a covered pitch is its modal label; an exact
modal tie excludes the pitch from coverage entirely. Vote-share thresholds
are inclusive (share >= threshold covers).
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field

from .classify import LabelDistribution, Prediction
from .errors import LengthMismatch, PolicyParamMissing, SchemaError
from .tiers import TIER_ORDER, Tier

POLICY_KINDS = ("k_of_n", "vote_share", "unanimity_min_raters")


@dataclass(frozen=True)
class EnsembleSpec:
    """An ordered member list with optional mixture weights."""

    member_ids: tuple[str, ...]
    weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if len(self.member_ids) < 2:
            raise SchemaError("an ensemble needs at least two members")
        if self.weights is not None:
            if len(self.weights) != len(self.member_ids):
                raise LengthMismatch(
                    f"{len(self.weights)} weights for {len(self.member_ids)} members")
            if any(w < 0 for w in self.weights):
                raise SchemaError("ensemble weights must be non-negative")
            if not math.isclose(sum(self.weights), 1.0, rel_tol=0.0, abs_tol=1e-9):
                raise SchemaError(f"ensemble weights sum to {sum(self.weights)!r}, not 1")


def ensemble_average(distributions: list[LabelDistribution],
                     weights: list[float] | None = None,
                     pitch_id: str = "") -> Prediction:
    """Arithmetic (or weighted) mean of member distributions.

    The mean is renormalized (guard against accumulated float drift; the
    correction is never more than 1e-12 for valid inputs) and the label is
    the fixed-order argmax.
    """
    if not distributions:
        raise LengthMismatch("no distributions to average")
    if weights is None:
        weights = [1.0 / len(distributions)] * len(distributions)
    else:
        if len(weights) != len(distributions):
            raise LengthMismatch(
                f"{len(weights)} weights for {len(distributions)} distributions")
        if any(w < 0 for w in weights):
            raise SchemaError("weights must be non-negative")
        total_w = sum(weights)
        if total_w <= 0:
            raise SchemaError("weights must not all be zero")
        weights = [w / total_w for w in weights]
    mixed = [0.0, 0.0, 0.0, 0.0]
    for w, dist in zip(weights, distributions):
        for i, p in enumerate(dist.probabilities):
            mixed[i] += w * p
    total = sum(mixed)
    dist = LabelDistribution(tuple(p / total for p in mixed))
    label, tie_broken = dist.argmax()
    return Prediction(pitch_id=pitch_id, label=label, distribution=dist,
                      confidence=dist.prob(label), tie_broken=tie_broken)


def majority_vote(labels: list[Tier]) -> Tier | None:
    """Strict plurality; None signals a tie."""
    if not labels:
        raise LengthMismatch("no labels to vote over")
    counts = Counter(labels)
    top = max(counts.values())
    winners = sorted(t for t, c in counts.items() if c == top)
    return winners[0] if len(winners) == 1 else None


@dataclass(frozen=True)
class ConsensusPolicy:
    """Coverage rule for filtering to high-agreement pitches.

    kind "k_of_n": cover when the modal count reaches k (param k, panel n).
    kind "vote_share": cover when modal share >= share (param share).
    kind "unanimity_min_raters": cover when >= min_raters rated and all agree.
    """

    kind: str
    k: int | None = None
    n: int | None = None
    share: float | None = None
    min_raters: int | None = None

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise PolicyParamMissing(f"unknown policy kind: {self.kind!r}")
        if self.kind == "k_of_n":
            if self.k is None or self.n is None:
                raise PolicyParamMissing("k_of_n needs k and n")
            if not 1 <= self.k <= self.n:
                raise PolicyParamMissing(f"need 1 <= k <= n, got k={self.k}, n={self.n}")
        elif self.kind == "vote_share":
            if self.share is None:
                raise PolicyParamMissing("vote_share needs share")
            if not 0.0 < self.share <= 1.0:
                raise PolicyParamMissing(f"share must be in (0, 1], got {self.share}")
        else:
            if self.min_raters is None:
                raise PolicyParamMissing("unanimity_min_raters needs min_raters")
            if self.min_raters < 1:
                raise PolicyParamMissing("min_raters must be >= 1")

    def describe(self) -> str:
        if self.kind == "k_of_n":
            return f"{self.k}_of_{self.n}"
        if self.kind == "vote_share":
            return f"share>={self.share:g}"
        return f"unanimity>={self.min_raters}"


@dataclass
class ConsensusReport:
    policy: str
    covered_pitch_ids: list[str]
    coverage: float
    accuracy: float
    per_tier_accuracy: dict[Tier, float]

    def to_json(self) -> str:
        return json.dumps({
            "policy": self.policy,
            "covered_pitch_ids": self.covered_pitch_ids,
            "coverage": self.coverage,
            "accuracy": self.accuracy,
            "per_tier_accuracy": {t.label: v for t, v in self.per_tier_accuracy.items()},
        }, sort_keys=True, indent=2)


def _modal(labels: list[Tier]) -> tuple[Tier | None, int]:
    counts = Counter(labels)
    top = max(counts.values())
    winners = [t for t, c in counts.items() if c == top]
    return (winners[0] if len(winners) == 1 else None), top


def consensus_filter(per_pitch_labels: dict[str, list[Tier]],
                     truths: dict[str, Tier],
                     policy: ConsensusPolicy) -> ConsensusReport:
    """Apply a coverage policy and score the covered slice.

    Coverage is covered / len(per_pitch_labels); accuracy is over covered
    pitches only; per-tier accuracy groups covered pitches by truth tier.
    """
    if not per_pitch_labels:
        raise LengthMismatch("no pitches to filter")
    missing = sorted(set(per_pitch_labels) - set(truths))
    if missing:
        raise SchemaError(f"no truth for pitches: {missing[:5]}")
    covered: list[tuple[str, Tier]] = []
    for pid in sorted(per_pitch_labels):
        labels = per_pitch_labels[pid]
        if not labels:
            continue
        mode, top = _modal(labels)
        if policy.kind == "k_of_n":
            ok = top >= policy.k and mode is not None
        elif policy.kind == "vote_share":
            ok = (top / len(labels)) >= policy.share and mode is not None
        else:
            ok = len(labels) >= policy.min_raters and len(set(labels)) == 1
        if ok:
            covered.append((pid, mode))
    coverage = len(covered) / len(per_pitch_labels)
    if covered:
        accuracy = sum(1 for pid, m in covered if m == truths[pid]) / len(covered)
    else:
        accuracy = 0.0
    per_tier: dict[Tier, float] = {}
    for tier in TIER_ORDER:
        slice_ = [(pid, m) for pid, m in covered if truths[pid] == tier]
        if slice_:
            per_tier[tier] = sum(1 for pid, m in slice_ if m == truths[pid]) / len(slice_)
    return ConsensusReport(policy=policy.describe(),
                           covered_pitch_ids=[pid for pid, _ in covered],
                           coverage=coverage, accuracy=accuracy,
                           per_tier_accuracy=per_tier)


def rank_ensembles(candidates: list[tuple[EnsembleSpec, float, float]]
                   ) -> list[tuple[EnsembleSpec, float, float]]:
    """Order by accuracy desc, macro-F1 desc, then member-id order.

    The final key compares the member-id tuples lexicographically, so fully
    tied candidates land in a fixed, reproducible order.
    """
    return sorted(candidates,
                  key=lambda c: (-c[1], -c[2], tuple(c[0].member_ids)))
