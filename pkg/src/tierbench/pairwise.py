"""Stratified cross-tier head-to-head comparisons.

Pairs put one worse-tier pitch against one better-tier pitch. Strata are
keyed by ordinal distance; within a stratum the cross-tier type counts are
balanced as evenly as the stratum total allows, remainders landing by
seeded draw. Presentation order is randomized from the same seed stream
and recorded, never inferred.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (ForeignPitchId, InsufficientPairs, SchemaError,
                     UnknownPairId)
from .ingest import BenchmarkSet, write_jsonl, _iter_jsonl
from .tiers import Tier

DEFAULT_STRATA = {1: 150, 2: 100, 3: 50}

# (low, high) tier code pairs per distance, in the fixed enumeration order
_TYPES_BY_DISTANCE = {
    1: [(4, 3), (3, 2), (2, 1)],
    2: [(4, 2), (3, 1)],
    3: [(4, 1)],
}


def pair_type_name(low: Tier, high: Tier) -> str:
    return f"{low.label}_{high.label}"


PAIR_TYPES = tuple(pair_type_name(Tier(lo), Tier(hi))
                   for d in (1, 2, 3) for lo, hi in _TYPES_BY_DISTANCE[d])


@dataclass(frozen=True)
class PairItem:
    id: str
    pitch_low: str   # worse tier (higher code)
    pitch_high: str  # better tier (lower code)
    tier_low: Tier
    tier_high: Tier
    distance: int
    pair_type: str
    presented_order: str  # "low_first" | "high_first"

    def __post_init__(self):
        if self.distance != int(self.tier_low) - int(self.tier_high):
            raise SchemaError(f"pair {self.id}: distance {self.distance} does not "
                              f"match tiers {self.tier_low.label}/{self.tier_high.label}")
        if not 1 <= self.distance <= 3:
            raise SchemaError(f"pair {self.id}: distance must be 1..3")
        if self.pair_type != pair_type_name(self.tier_low, self.tier_high):
            raise SchemaError(f"pair {self.id}: wrong pair_type {self.pair_type!r}")
        if self.presented_order not in ("low_first", "high_first"):
            raise SchemaError(f"pair {self.id}: bad presented_order")


@dataclass
class PairSet:
    benchmark_id: str
    seed: int
    strata: dict[int, int]
    items: list[PairItem]

    def by_id(self) -> dict[str, PairItem]:
        return {p.id: p for p in self.items}


def build_pairs(bench: BenchmarkSet, seed: int,
                strata: dict[int, int] | None = None) -> PairSet:
    """Draw a stratified pair set from a benchmark.

    Deterministic in (benchmark contents, seed, strata): candidate pools
    are sorted by pitch id before every draw, and one generator seeded once
    drives remainder assignment, pair sampling, and presentation order in a
    fixed iteration order.
    """
    strata = dict(DEFAULT_STRATA if strata is None else strata)
    by_tier: dict[int, list[str]] = {1: [], 2: [], 3: [], 4: []}
    for p in bench.pitches:
        by_tier[int(p.truth)].append(p.id)
    for code in by_tier:
        by_tier[code].sort()
    rng = np.random.default_rng(seed)
    items: list[PairItem] = []
    for distance in sorted(strata):
        if distance not in _TYPES_BY_DISTANCE:
            raise SchemaError(f"stratum distance must be 1..3, got {distance}")
        total = strata[distance]
        if total < 0:
            raise SchemaError(f"stratum count must be >= 0, got {total}")
        types = _TYPES_BY_DISTANCE[distance]
        base, rem = divmod(total, len(types))
        counts = [base] * len(types)
        if rem:
            for i in rng.choice(len(types), size=rem, replace=False):
                counts[i] += 1
        for (lo, hi), count in zip(types, counts):
            lows, highs = by_tier[lo], by_tier[hi]
            pool_size = len(lows) * len(highs)
            if pool_size < count:
                raise InsufficientPairs(
                    f"distance-{distance} stratum: type "
                    f"{pair_type_name(Tier(lo), Tier(hi))} needs {count} pairs, "
                    f"pool has {pool_size}")
            chosen = rng.choice(pool_size, size=count, replace=False)
            flips = rng.integers(0, 2, size=count)
            for k, (flat, flip) in enumerate(zip(sorted(chosen), flips)):
                low_id = lows[flat // len(highs)]
                high_id = highs[flat % len(highs)]
                ptype = pair_type_name(Tier(lo), Tier(hi))
                items.append(PairItem(
                    id=f"d{distance}-{ptype}-{k:04d}",
                    pitch_low=low_id, pitch_high=high_id,
                    tier_low=Tier(lo), tier_high=Tier(hi),
                    distance=distance, pair_type=ptype,
                    presented_order="low_first" if flip == 0 else "high_first"))
    return PairSet(benchmark_id=bench.id, seed=seed, strata=strata, items=items)


def save_pairs(pairs: PairSet, path: str | Path) -> None:
    meta = {"kind": "pairset", "benchmark_id": pairs.benchmark_id,
            "seed": pairs.seed,
            "strata": {str(d): c for d, c in sorted(pairs.strata.items())}}
    rows = [{"id": p.id, "pitch_low": p.pitch_low, "pitch_high": p.pitch_high,
             "tier_low": p.tier_low.label, "tier_high": p.tier_high.label,
             "distance": p.distance, "pair_type": p.pair_type,
             "presented_order": p.presented_order} for p in pairs.items]
    write_jsonl(path, rows, meta=meta)


def load_pairs(path: str | Path) -> PairSet:
    meta, rows = _iter_jsonl(Path(path))
    meta = meta or {}
    items = []
    for lineno, row in rows:
        try:
            items.append(PairItem(
                id=str(row["id"]), pitch_low=str(row["pitch_low"]),
                pitch_high=str(row["pitch_high"]),
                tier_low=Tier.from_name(row["tier_low"]),
                tier_high=Tier.from_name(row["tier_high"]),
                distance=int(row["distance"]), pair_type=str(row["pair_type"]),
                presented_order=str(row["presented_order"])))
        except KeyError as exc:
            raise SchemaError(f"missing pair field {exc.args[0]!r}", line=lineno) from None
    return PairSet(benchmark_id=str(meta.get("benchmark_id", "")),
                   seed=int(meta.get("seed", -1)),
                   strata={int(d): int(c)
                           for d, c in dict(meta.get("strata", {})).items()},
                   items=items)


@dataclass
class PairScore:
    """Correct/total tallies; a missing choice counts as incorrect."""

    overall: tuple[int, int]
    per_distance: dict[int, tuple[int, int]]
    per_type: dict[str, tuple[int, int]]
    missing_pair_ids: list[str] = field(default_factory=list)

    @staticmethod
    def _acc(cell: tuple[int, int]) -> float:
        correct, total = cell
        return correct / total if total else 0.0

    def accuracy(self) -> float:
        return self._acc(self.overall)

    def distance_accuracy(self, d: int) -> float:
        return self._acc(self.per_distance[d])

    def type_accuracy(self, t: str) -> float:
        return self._acc(self.per_type[t])

    def to_json_dict(self) -> dict:
        return {
            "overall": {"correct": self.overall[0], "total": self.overall[1],
                        "accuracy": self.accuracy()},
            "per_distance": {str(d): {"correct": c, "total": t,
                                      "accuracy": self._acc((c, t))}
                             for d, (c, t) in sorted(self.per_distance.items())},
            "per_type": {k: {"correct": c, "total": t, "accuracy": self._acc((c, t))}
                         for k, (c, t) in sorted(self.per_type.items())},
            "missing_pair_ids": self.missing_pair_ids,
        }


def pair_correctness(choices: dict[str, str], pairs: PairSet) -> dict[str, bool]:
    """Per-pair correctness under the fixed-denominator rule.

    Every pair in the set gets a verdict; a missing choice is wrong. A
    choice naming a foreign pitch, or a pair id outside the set, is an
    input error, not a wrong answer.
    """
    by_id = pairs.by_id()
    stray = sorted(set(choices) - set(by_id))
    if stray:
        raise UnknownPairId(f"choices reference unknown pair ids: {stray[:5]}")
    verdicts: dict[str, bool] = {}
    for pair in pairs.items:
        chosen = choices.get(pair.id)
        if chosen is None:
            verdicts[pair.id] = False
            continue
        if chosen not in (pair.pitch_low, pair.pitch_high):
            raise ForeignPitchId(
                f"pair {pair.id}: chose {chosen!r}, not one of its pitches")
        verdicts[pair.id] = chosen == pair.pitch_high
    return verdicts


def score_pairs(choices: dict[str, str], pairs: PairSet) -> PairScore:
    verdicts = pair_correctness(choices, pairs)
    overall = [0, 0]
    per_distance: dict[int, list[int]] = {}
    per_type: dict[str, list[int]] = {}
    missing = []
    for pair in pairs.items:
        ok = verdicts[pair.id]
        if pair.id not in choices:
            missing.append(pair.id)
        overall[0] += ok
        overall[1] += 1
        per_distance.setdefault(pair.distance, [0, 0])
        per_distance[pair.distance][0] += ok
        per_distance[pair.distance][1] += 1
        per_type.setdefault(pair.pair_type, [0, 0])
        per_type[pair.pair_type][0] += ok
        per_type[pair.pair_type][1] += 1
    return PairScore(overall=(overall[0], overall[1]),
                     per_distance={d: (c, t) for d, (c, t) in per_distance.items()},
                     per_type={k: (c, t) for k, (c, t) in per_type.items()},
                     missing_pair_ids=missing)


def discordance(choices_a: dict[str, str], choices_b: dict[str, str],
                pairs: PairSet) -> dict:
    """Cross-tab of two evaluators' pair correctness plus exact McNemar."""
    from .stats import mcnemar_from_counts
    va = pair_correctness(choices_a, pairs)
    vb = pair_correctness(choices_b, pairs)
    both = a_only = b_only = neither = 0
    for pid in va:
        x, y = va[pid], vb[pid]
        both += x and y
        a_only += x and not y
        b_only += y and not x
        neither += not x and not y
    test = mcnemar_from_counts(a_only, b_only, mode="exact")
    return {"both": both, "a_only": a_only, "b_only": b_only,
            "neither": neither, "mcnemar": test}
