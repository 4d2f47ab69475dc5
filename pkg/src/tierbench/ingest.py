"""Dataset ingestion: pitches, predictions, and human ratings.

Files are JSONL, UTF-8, one record per line. The first line may be a
metadata object of the form {"_meta": {...}}; loaders skip it and pick up
provenance fields (benchmark id, sampling params) when present. Line
numbers in errors count from 1 and include any meta line.

Serialization is canonical (sorted keys, compact separators, None fields
dropped) so load -> serialize -> load round-trips bit-identically.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from . import classify
from .errors import (DuplicatePitchId, EmptyFile, InsufficientTier,
                     OutOfRangeLikert, SchemaError, UnknownLabel)
from .tiers import TIER_ORDER, Pitch, Tier, normalize_label

log = logging.getLogger(__name__)

CHANCE_FOUR_TIER = 0.25

_SURVEY_SHORTHAND = {Tier.EXCEPTIONAL: "Top", Tier.STRONG: "Top-",
                     Tier.FAIR: "Good", Tier.LIMITED: "Fair"}

PREDICTION_KINDS = ("logprob", "sampled", "label_only")
PANELS = ("expert", "junior")


@dataclass
class BenchmarkSet:
    """A pitch collection used as an evaluation target.

    per_tier_count is set when the set is tier-balanced, None otherwise.
    chance is the uniform-guess accuracy (1/4 for the four-tier task).
    """

    id: str
    pitches: list[Pitch]
    per_tier_count: int | None = None
    chance: float = CHANCE_FOUR_TIER

    def __post_init__(self):
        counts = self.tier_counts()
        balanced = len(set(counts.values())) == 1 and self.pitches
        if self.per_tier_count is None and balanced:
            self.per_tier_count = next(iter(counts.values()))

    def tier_counts(self) -> dict[Tier, int]:
        counts = {t: 0 for t in TIER_ORDER}
        for p in self.pitches:
            counts[p.truth] += 1
        return counts

    def truths(self) -> dict[str, Tier]:
        return {p.id: p.truth for p in self.pitches}

    def __len__(self) -> int:
        return len(self.pitches)


@dataclass(frozen=True)
class PredictionRecord:
    """One evaluator's output for one pitch.

    Exactly one payload is populated, according to kind:
      logprob     -> distribution (solved from the label log-probs)
      sampled     -> runs, a list of (raw_text, parsed tier or None)
      label_only  -> label (+ optional confidence)
    """

    evaluator_id: str
    pitch_id: str
    kind: str
    distribution: classify.LabelDistribution | None = None
    runs: tuple[tuple[str, Tier | None], ...] | None = None
    label: Tier | None = None
    confidence: float | None = None

    def __post_init__(self):
        if self.kind not in PREDICTION_KINDS:
            raise SchemaError(f"unknown prediction kind: {self.kind!r}")
        payloads = {"logprob": self.distribution, "sampled": self.runs,
                    "label_only": self.label}
        expected = payloads.pop(self.kind)
        if expected is None:
            raise SchemaError(f"kind {self.kind!r} requires its payload")
        extras = [k for k, v in payloads.items() if v is not None]
        if extras:
            raise SchemaError(
                f"kind {self.kind!r} must not also carry {extras} payloads")

    def point_label(self) -> Tier | None:
        """Collapse to a single label: stored label, argmax, or run majority."""
        if self.kind == "label_only":
            return self.label
        if self.kind == "logprob":
            return self.distribution.argmax()[0]
        majority, _ = classify.runs_majority([t for _, t in self.runs])
        return majority


@dataclass(frozen=True)
class RaterRecord:
    """One human rating of one pitch (survey shorthand already normalized)."""

    rater_id: str
    panel: str
    pitch_id: str
    tier: Tier
    confidence: int
    familiarity: int
    prior_exposure: bool | None = None
    seconds_spent: float | None = None

    def __post_init__(self):
        if self.panel not in PANELS:
            raise SchemaError(f"unknown panel: {self.panel!r}")
        for name in ("confidence", "familiarity"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or not 1 <= v <= 5:
                raise OutOfRangeLikert(f"{name} must be an integer in 1..5, got {v!r}")
        if self.seconds_spent is not None and self.seconds_spent < 0:
            raise SchemaError(f"seconds_spent must be >= 0, got {self.seconds_spent}")


# ---------------------------------------------------------------------------
# JSONL plumbing


def _iter_jsonl(path: Path) -> tuple[dict | None, list[tuple[int, dict]]]:
    rows: list[tuple[int, dict]] = []
    meta = None
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON: {exc.msg}", line=lineno) from None
            if not isinstance(obj, dict):
                raise SchemaError("record must be a JSON object", line=lineno)
            if lineno == 1 and "_meta" in obj:
                meta = obj["_meta"]
                continue
            rows.append((lineno, obj))
    if meta is None and not rows:
        raise EmptyFile(f"no records in {path}")
    return meta, rows


def _dump_line(obj: dict[str, Any]) -> str:
    pruned = {k: v for k, v in obj.items() if v is not None}
    return json.dumps(pruned, sort_keys=True, separators=(",", ":")) + "\n"


def write_jsonl(path: str | Path, records: Iterable[dict[str, Any]],
                meta: dict[str, Any] | None = None) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        if meta is not None:
            fh.write(_dump_line({"_meta": meta}))
        for rec in records:
            fh.write(_dump_line(rec))


def _require(row: dict, key: str, lineno: int) -> Any:
    if key not in row or row[key] is None:
        raise SchemaError(f"missing required field {key!r}", line=lineno)
    return row[key]


# ---------------------------------------------------------------------------
# Pitches / benchmarks


def _pitch_from_row(row: dict, lineno: int) -> Pitch:
    raw_truth = _require(row, "truth", lineno)
    try:
        truth = normalize_label(str(raw_truth), "model")
    except UnknownLabel as exc:
        raise SchemaError(str(exc), line=lineno) from None
    try:
        return Pitch(id=str(_require(row, "id", lineno)),
                     field=str(_require(row, "field", lineno)),
                     text_full=str(_require(row, "text_full", lineno)),
                     truth=truth,
                     text_short=row.get("text_short"),
                     journal=row.get("journal"),
                     research_domain=row.get("research_domain"))
    except SchemaError as exc:
        raise SchemaError(str(exc), line=lineno) from None


def load_benchmark(path: str | Path) -> BenchmarkSet:
    path = Path(path)
    meta, rows = _iter_jsonl(path)
    pitches = []
    seen: set[str] = set()
    for lineno, row in rows:
        pitch = _pitch_from_row(row, lineno)
        if pitch.id in seen:
            raise DuplicatePitchId(f"line {lineno}: duplicate pitch id {pitch.id!r}")
        seen.add(pitch.id)
        pitches.append(pitch)
    if not pitches:
        raise EmptyFile(f"no pitches in {path}")
    set_id = (meta or {}).get("id") or path.stem
    return BenchmarkSet(id=set_id, pitches=pitches)


def pitch_to_row(p: Pitch) -> dict[str, Any]:
    return {"id": p.id, "field": p.field, "text_full": p.text_full,
            "truth": p.truth.label, "text_short": p.text_short,
            "journal": p.journal, "research_domain": p.research_domain}


def save_benchmark(bench: BenchmarkSet, path: str | Path) -> None:
    meta = {"id": bench.id, "per_tier_count": bench.per_tier_count,
            "chance": bench.chance}
    write_jsonl(path, (pitch_to_row(p) for p in bench.pitches), meta=meta)


def assemble_balanced(pool: list[Pitch], per_tier: int, seed: int) -> BenchmarkSet:
    """Seeded tier-balanced draw from a pitch pool.

    The pool is grouped by truth tier and sorted by pitch id before
    sampling, so the result depends only on (pool contents, per_tier, seed),
    never on input order.
    """
    if per_tier <= 0:
        raise SchemaError(f"per_tier must be positive, got {per_tier}")
    by_tier: dict[Tier, list[Pitch]] = {t: [] for t in TIER_ORDER}
    for p in pool:
        by_tier[p.truth].append(p)
    rng = np.random.default_rng(seed)
    chosen: list[Pitch] = []
    for tier in TIER_ORDER:
        group = sorted(by_tier[tier], key=lambda p: p.id)
        if len(group) < per_tier:
            raise InsufficientTier(
                f"tier {tier.label}: need {per_tier} pitches, pool has {len(group)}")
        idx = rng.choice(len(group), size=per_tier, replace=False)
        chosen.extend(group[i] for i in sorted(idx))
    return BenchmarkSet(id=f"balanced-{per_tier}x4-seed{seed}", pitches=chosen,
                        per_tier_count=per_tier)


# ---------------------------------------------------------------------------
# Predictions


def _prediction_from_row(row: dict, lineno: int) -> PredictionRecord:
    kind = str(_require(row, "kind", lineno))
    if kind not in PREDICTION_KINDS:
        raise SchemaError(f"unknown prediction kind: {kind!r}", line=lineno)
    payload_keys = {"logprobs", "distribution", "runs", "label"}
    present = sorted(k for k in payload_keys if row.get(k) is not None)
    common = dict(evaluator_id=str(_require(row, "evaluator_id", lineno)),
                  pitch_id=str(_require(row, "pitch_id", lineno)),
                  kind=kind, confidence=row.get("confidence"))

    def bad(msg: str) -> SchemaError:
        return SchemaError(msg, line=lineno)

    try:
        if kind == "logprob":
            if "label" in present or "runs" in present:
                raise bad(f"logprob record must not carry {present} together")
            if "distribution" in present and "logprobs" in present:
                raise bad("give either logprobs or distribution, not both")
            if "distribution" in present:
                probs = {normalize_label(k, "model"): float(v)
                         for k, v in row["distribution"].items()}
                dist = classify.LabelDistribution.from_dict(probs)
            elif "logprobs" in present:
                lps = {normalize_label(k, "model"): float(v)
                       for k, v in row["logprobs"].items()}
                dist = classify.classify_logprob(lps).distribution
            else:
                raise bad("logprob record needs logprobs or distribution")
            return PredictionRecord(**common, distribution=dist)
        if kind == "sampled":
            if present != ["runs"]:
                raise bad(f"sampled record needs runs only, got {present}")
            runs = tuple((str(r), classify.parse_label_text(str(r)))
                         for r in row["runs"])
            if not runs:
                raise bad("runs must be non-empty")
            return PredictionRecord(**common, runs=runs)
        # label_only
        if present != ["label"]:
            raise bad(f"label_only record needs label only, got {present}")
        label = normalize_label(str(row["label"]), "model")
        return PredictionRecord(**common, label=label)
    except (UnknownLabel, SchemaError) as exc:
        if isinstance(exc, SchemaError) and exc.line is not None:
            raise
        raise SchemaError(str(exc), line=lineno) from None


def load_predictions(path: str | Path) -> tuple[list[PredictionRecord], dict | None]:
    """Read predictions.jsonl; returns (records, meta header or None)."""
    meta, rows = _iter_jsonl(Path(path))
    return [_prediction_from_row(row, lineno) for lineno, row in rows], meta


def prediction_to_row(rec: PredictionRecord) -> dict[str, Any]:
    row: dict[str, Any] = {"evaluator_id": rec.evaluator_id,
                           "pitch_id": rec.pitch_id, "kind": rec.kind,
                           "confidence": rec.confidence}
    if rec.kind == "logprob":
        row["distribution"] = {t.label: p for t, p in rec.distribution.as_dict().items()}
    elif rec.kind == "sampled":
        row["runs"] = [raw for raw, _ in rec.runs]
    else:
        row["label"] = rec.label.label
    return row


def save_predictions(records: Iterable[PredictionRecord], path: str | Path,
                     meta: dict[str, Any] | None = None) -> None:
    write_jsonl(path, (prediction_to_row(r) for r in records), meta=meta)


def match_predictions(records: list[PredictionRecord], bench: BenchmarkSet
                      ) -> tuple[list[PredictionRecord], list[str]]:
    """Split records into (known-pitch, unknown-pitch-id list).

    Unknown ids are reported, not silently dropped; callers decide.
    """
    known = bench.truths()
    matched = [r for r in records if r.pitch_id in known]
    unknown = sorted({r.pitch_id for r in records} - set(known))
    if unknown:
        log.warning("%d prediction pitch ids not in benchmark %s: %s",
                    len(unknown), bench.id, ", ".join(unknown[:10]))
    return matched, unknown


# ---------------------------------------------------------------------------
# Ratings


def _rating_from_row(row: dict, lineno: int) -> RaterRecord:
    raw_tier = str(_require(row, "tier", lineno))
    try:
        tier = normalize_label(raw_tier, "human_survey")
    except UnknownLabel as exc:
        raise SchemaError(str(exc), line=lineno) from None
    try:
        return RaterRecord(rater_id=str(_require(row, "rater_id", lineno)),
                           panel=str(_require(row, "panel", lineno)),
                           pitch_id=str(_require(row, "pitch_id", lineno)),
                           tier=tier,
                           confidence=_require(row, "confidence", lineno),
                           familiarity=_require(row, "familiarity", lineno),
                           prior_exposure=row.get("prior_exposure"),
                           seconds_spent=row.get("seconds_spent"))
    except (OutOfRangeLikert, SchemaError) as exc:
        if isinstance(exc, OutOfRangeLikert):
            raise OutOfRangeLikert(f"line {lineno}: {exc}") from None
        raise SchemaError(str(exc), line=lineno) from None


def load_ratings(path: str | Path,
                 min_avg_seconds: float | None = None) -> list[RaterRecord]:
    """Read ratings.jsonl. The seconds filter is applied only when asked."""
    _, rows = _iter_jsonl(Path(path))
    records = [_rating_from_row(row, lineno) for lineno, row in rows]
    if min_avg_seconds is not None:
        records, excluded = filter_raters_by_time(records, min_avg_seconds)
        if excluded:
            log.info("time filter (<%gs avg) excluded %d raters: %s",
                     min_avg_seconds, len(excluded), ", ".join(excluded))
    return records


def filter_raters_by_time(records: list[RaterRecord], min_avg_seconds: float
                          ) -> tuple[list[RaterRecord], list[str]]:
    """Drop raters whose mean seconds-per-pitch falls below the floor.

    Raters with no timing data are kept. Returns (kept, excluded_rater_ids).
    """
    totals: dict[str, list[float]] = {}
    for r in records:
        if r.seconds_spent is not None:
            totals.setdefault(r.rater_id, []).append(r.seconds_spent)
    excluded = sorted(rid for rid, secs in totals.items()
                      if sum(secs) / len(secs) < min_avg_seconds)
    kept = [r for r in records if r.rater_id not in set(excluded)]
    return kept, excluded


def rating_to_row(rec: RaterRecord) -> dict[str, Any]:
    # tier is written back in survey shorthand; the canonical name "fair"
    # would otherwise collide with the survey's bottom anchor on reload.
    return {"rater_id": rec.rater_id, "panel": rec.panel,
            "pitch_id": rec.pitch_id, "tier": _SURVEY_SHORTHAND[rec.tier],
            "confidence": rec.confidence, "familiarity": rec.familiarity,
            "prior_exposure": rec.prior_exposure,
            "seconds_spent": rec.seconds_spent}


def save_ratings(records: Iterable[RaterRecord], path: str | Path) -> None:
    write_jsonl(path, (rating_to_row(r) for r in records))


def ratings_by_pitch(records: list[RaterRecord]) -> dict[str, list[Tier]]:
    out: dict[str, list[Tier]] = {}
    for r in records:
        out.setdefault(r.pitch_id, []).append(r.tier)
    return out


# ---------------------------------------------------------------------------
# CSV mirrors (export only; JSONL stays the system of record)


def _csv_string(header: list[str], rows: Iterable[list[Any]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def pitches_to_csv(bench: BenchmarkSet) -> str:
    header = ["id", "field", "truth", "journal", "research_domain",
              "text_short", "text_full"]
    rows = [[p.id, p.field, p.truth.label, p.journal or "",
             p.research_domain or "", p.text_short or "", p.text_full]
            for p in bench.pitches]
    return _csv_string(header, rows)


def predictions_to_csv(records: list[PredictionRecord]) -> str:
    header = ["evaluator_id", "pitch_id", "kind", "label", "confidence",
              "p_exceptional", "p_strong", "p_fair", "p_limited", "runs_json"]
    rows = []
    for r in records:
        probs = [""] * 4
        if r.distribution is not None:
            probs = [repr(p) for p in r.distribution.probabilities]
        label = r.point_label()
        rows.append([r.evaluator_id, r.pitch_id, r.kind,
                     label.label if label else "",
                     "" if r.confidence is None else repr(r.confidence),
                     *probs,
                     json.dumps([raw for raw, _ in r.runs]) if r.runs else ""])
    return _csv_string(header, rows)


def ratings_to_csv(records: list[RaterRecord]) -> str:
    header = ["rater_id", "panel", "pitch_id", "tier", "confidence",
              "familiarity", "prior_exposure", "seconds_spent"]
    rows = [[r.rater_id, r.panel, r.pitch_id, r.tier.label, r.confidence,
             r.familiarity, "" if r.prior_exposure is None else r.prior_exposure,
             "" if r.seconds_spent is None else r.seconds_spent]
            for r in records]
    return _csv_string(header, rows)
