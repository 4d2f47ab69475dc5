"""Confidence calibration: ECE, Brier, confidence gap, selective accuracy.

Confidence is the max label probability for model predictions (or an
explicit confidence field) and (likert - 1) / 4 for human ratings, putting
both on [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .classify import Prediction
from .errors import DegenerateSplit, LengthMismatch, MissingConfidence
from .ingest import PredictionRecord, RaterRecord
from .tiers import TIER_ORDER, Tier


def confidence_of(record) -> float:
    """Normalized [0, 1] confidence for a Prediction, PredictionRecord, or
    RaterRecord."""
    if isinstance(record, Prediction):
        return record.confidence
    if isinstance(record, RaterRecord):
        return (record.confidence - 1) / 4.0
    if isinstance(record, PredictionRecord):
        if record.confidence is not None:
            if not 0.0 <= record.confidence <= 1.0:
                raise MissingConfidence(
                    f"confidence must be in [0, 1], got {record.confidence}")
            return record.confidence
        if record.distribution is not None:
            return max(record.distribution.probabilities)
        raise MissingConfidence(
            f"record {record.evaluator_id}/{record.pitch_id} carries no confidence")
    raise MissingConfidence(f"cannot read a confidence from {type(record).__name__}")


@dataclass(frozen=True)
class CalibrationBin:
    low: float
    high: float
    count: int
    mean_confidence: float | None
    accuracy: float | None


@dataclass
class CalibrationReport:
    ece: float
    brier: float | None
    bins: list[CalibrationBin]
    n_bins: int
    confidence_gap: float | None = None
    gap_p_value: float | None = None
    brier_decomposition: tuple[float, float, float] | None = None

    def to_json_dict(self) -> dict:
        d = {
            "ece": self.ece,
            "brier": self.brier,
            "n_bins": self.n_bins,
            "bins": [{"low": b.low, "high": b.high, "count": b.count,
                      "mean_confidence": b.mean_confidence, "accuracy": b.accuracy}
                     for b in self.bins],
            "confidence_gap": self.confidence_gap,
            "gap_p_value": self.gap_p_value,
        }
        if self.brier_decomposition is not None:
            rel, res, unc = self.brier_decomposition
            d["brier_decomposition"] = {"reliability": rel, "resolution": res,
                                        "uncertainty": unc}
        return d


def _bin_index(conf: float, n_bins: int) -> int:
    # equal-width bins with right-inclusive upper edges; 0 falls in bin 0
    idx = math.ceil(conf * n_bins) - 1
    return min(max(idx, 0), n_bins - 1)


def ece(confidences: list[float], correct_flags: list[bool],
        n_bins: int = 10) -> tuple[float, list[CalibrationBin]]:
    """Expected calibration error over equal-width confidence bins.

    ECE = sum_b (count_b / N) * |accuracy_b - mean_confidence_b|. All bins
    are reported, empty ones with count 0 and no statistics.
    """
    if len(confidences) != len(correct_flags):
        raise LengthMismatch(f"{len(confidences)} confidences vs "
                             f"{len(correct_flags)} outcomes")
    if not confidences:
        raise LengthMismatch("nothing to calibrate")
    if any(not 0.0 <= c <= 1.0 for c in confidences):
        raise MissingConfidence("confidences must lie in [0, 1]")
    sums = [[0, 0.0, 0] for _ in range(n_bins)]  # count, conf sum, correct sum
    for c, ok in zip(confidences, correct_flags):
        b = _bin_index(c, n_bins)
        sums[b][0] += 1
        sums[b][1] += c
        sums[b][2] += bool(ok)
    n = len(confidences)
    bins: list[CalibrationBin] = []
    total = 0.0
    for i, (count, conf_sum, correct_sum) in enumerate(sums):
        low, high = i / n_bins, (i + 1) / n_bins
        if count == 0:
            bins.append(CalibrationBin(low, high, 0, None, None))
            continue
        mean_conf = conf_sum / count
        acc = correct_sum / count
        total += (count / n) * abs(acc - mean_conf)
        bins.append(CalibrationBin(low, high, count, mean_conf, acc))
    return total, bins


def brier(distributions: list, truths: list[Tier],
          decompose: bool = False):
    """Multiclass Brier score, optionally with its exact decomposition.

    Score = mean over items of sum_k (p_k - 1[k = truth])^2. The
    decomposition groups items by identical probability vectors (the finest
    binning, under which reliability - resolution + uncertainty recovers the
    score to float precision on any input; coarser confidence bins would
    leave a within-bin variance residual).
    """
    if len(distributions) != len(truths):
        raise LengthMismatch(f"{len(distributions)} distributions vs "
                             f"{len(truths)} truths")
    if not distributions:
        raise LengthMismatch("nothing to score")
    vectors = [d.probabilities for d in distributions]
    onehots = [tuple(1.0 if t == u else 0.0 for u in TIER_ORDER) for t in truths]
    n = len(vectors)
    score = sum(sum((p - o) ** 2 for p, o in zip(vec, hot))
                for vec, hot in zip(vectors, onehots)) / n
    if not decompose:
        return score

    groups: dict[tuple, list[int]] = {}
    for i, vec in enumerate(vectors):
        groups.setdefault(vec, []).append(i)
    base = [sum(hot[j] for hot in onehots) / n for j in range(4)]
    reliability = 0.0
    resolution = 0.0
    for vec, members in groups.items():
        m = len(members)
        obar = [sum(onehots[i][j] for i in members) / m for j in range(4)]
        reliability += m * sum((vec[j] - obar[j]) ** 2 for j in range(4))
        resolution += m * sum((obar[j] - base[j]) ** 2 for j in range(4))
    reliability /= n
    resolution /= n
    uncertainty = sum(b * (1 - b) for b in base)
    return score, (reliability, resolution, uncertainty)


def confidence_gap(confidences: list[float],
                   correct_flags: list[bool]) -> tuple[float, float]:
    """Mean confidence on correct minus on incorrect items, with a one-sided
    rank-test p-value (correct > incorrect).

    Raises DegenerateSplit when either side is empty. Identical confidences
    everywhere give gap 0 and p 0.5 under the normal approximation.
    """
    if len(confidences) != len(correct_flags):
        raise LengthMismatch(f"{len(confidences)} confidences vs "
                             f"{len(correct_flags)} outcomes")
    right = [c for c, ok in zip(confidences, correct_flags) if ok]
    wrong = [c for c, ok in zip(confidences, correct_flags) if not ok]
    if not right or not wrong:
        raise DegenerateSplit(
            f"need both outcomes ({len(right)} correct, {len(wrong)} incorrect)")
    gap = sum(right) / len(right) - sum(wrong) / len(wrong)
    from .stats import mann_whitney
    result = mann_whitney(right, wrong, sided="greater")
    return gap, result.p


@dataclass
class SelectiveCurve:
    """Accuracy at every confidence-ranked coverage level."""

    points: list[tuple[float, float]]  # (coverage, accuracy), coverage k/N
    order: list[str]  # pitch ids, most confident first

    def to_json_dict(self) -> dict:
        return {"points": [{"coverage": c, "accuracy": a} for c, a in self.points],
                "order": self.order}


def selective_curve(confidences: list[float], correct_flags: list[bool],
                    ids: list[str] | None = None) -> SelectiveCurve:
    """Sort by confidence (desc, ties by id asc) and sweep coverage 1..N."""
    if len(confidences) != len(correct_flags):
        raise LengthMismatch(f"{len(confidences)} confidences vs "
                             f"{len(correct_flags)} outcomes")
    if not confidences:
        raise LengthMismatch("nothing to rank")
    if ids is None:
        width = len(str(len(confidences) - 1))
        ids = [f"{i:0{width}d}" for i in range(len(confidences))]
    elif len(ids) != len(confidences):
        raise LengthMismatch(f"{len(ids)} ids vs {len(confidences)} confidences")
    ranked = sorted(zip(confidences, correct_flags, ids),
                    key=lambda row: (-row[0], row[2]))
    n = len(ranked)
    points = []
    running = 0
    for k, (_, ok, _) in enumerate(ranked, start=1):
        running += bool(ok)
        points.append((k / n, running / k))
    return SelectiveCurve(points=points, order=[pid for _, _, pid in ranked])


def calibration_report(confidences: list[float], correct_flags: list[bool],
                       distributions: list | None = None,
                       truths: list[Tier] | None = None,
                       n_bins: int = 10) -> CalibrationReport:
    """Bundle ECE (+ Brier and gap when computable) into one report."""
    ece_value, bins = ece(confidences, correct_flags, n_bins=n_bins)
    brier_value = None
    decomposition = None
    if distributions is not None and truths is not None:
        brier_value, decomposition = brier(distributions, truths, decompose=True)
    gap = p = None
    try:
        gap, p = confidence_gap(confidences, correct_flags)
    except DegenerateSplit:
        pass
    return CalibrationReport(ece=ece_value, brier=brier_value, bins=bins,
                             n_bins=n_bins, confidence_gap=gap, gap_p_value=p,
                             brier_decomposition=decomposition)
