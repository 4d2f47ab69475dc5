"""Accuracy, confusion, per-tier F1, and skill relative to chance.

Conventions fixed across the package: confusion rows are truth, columns
are predicted, both in tier-code order; any 0/0 in precision/recall/F1 is
defined as 0; prediction entropy is Shannon entropy of the predicted-label
histogram normalized by log(4).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from .errors import EmptyCounts, LengthMismatch
from .tiers import TIER_ORDER, Tier, headroom

CI_METHODS = ("normal", "wilson", "clopper_pearson", "bootstrap")


@dataclass(frozen=True)
class ConfusionMatrix:
    """4x4 count matrix, rows = truth, cols = predicted (tier-code order)."""

    counts: np.ndarray
    n: int

    def row_normalized(self) -> np.ndarray:
        out = np.zeros((4, 4), dtype=float)
        sums = self.counts.sum(axis=1)
        nz = sums > 0
        out[nz] = self.counts[nz] / sums[nz, None]
        return out

    def diagonal(self) -> tuple[int, ...]:
        return tuple(int(x) for x in np.diag(self.counts))

    def predicted_counts(self) -> dict[Tier, int]:
        cols = self.counts.sum(axis=0)
        return {t: int(cols[int(t) - 1]) for t in TIER_ORDER}

    def truth_counts(self) -> dict[Tier, int]:
        rows = self.counts.sum(axis=1)
        return {t: int(rows[int(t) - 1]) for t in TIER_ORDER}


def confusion(preds: list[Tier], truths: list[Tier]) -> ConfusionMatrix:
    if len(preds) != len(truths):
        raise LengthMismatch(
            f"{len(preds)} predictions vs {len(truths)} truths")
    counts = np.zeros((4, 4), dtype=np.int64)
    for p, t in zip(preds, truths):
        counts[int(t) - 1, int(p) - 1] += 1
    return ConfusionMatrix(counts=counts, n=len(preds))


def _safe_div(num: float, den: float) -> float:
    return num / den if den else 0.0


@dataclass
class MetricsReport:
    accuracy: float
    per_tier_precision: dict[Tier, float]
    per_tier_recall: dict[Tier, float]
    per_tier_f1: dict[Tier, float]
    macro_f1: float
    predicted_counts: dict[Tier, int]
    above_chance_pp: float
    headroom: float
    n: int
    chance: float
    ci: tuple[float, float, str] | None = None

    def to_json_dict(self) -> dict:
        d = {
            "n": self.n,
            "chance": self.chance,
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "above_chance_pp": self.above_chance_pp,
            "headroom": self.headroom,
            "per_tier_precision": {t.label: v for t, v in self.per_tier_precision.items()},
            "per_tier_recall": {t.label: v for t, v in self.per_tier_recall.items()},
            "per_tier_f1": {t.label: v for t, v in self.per_tier_f1.items()},
            "predicted_counts": {t.label: v for t, v in self.predicted_counts.items()},
        }
        if self.ci is not None:
            d["ci"] = {"low": self.ci[0], "high": self.ci[1], "method": self.ci[2]}
        return d


def summarize(cm: ConfusionMatrix, chance: float,
              ci_method: str | None = None, level: float = 0.95) -> MetricsReport:
    """Headline metrics from a confusion matrix.

    ci_method, when given, attaches an accuracy CI computed by that method
    ("normal", "wilson", or "clopper_pearson"; bootstrap needs item-level
    data, see macro_f1_bootstrap_ci).
    """
    counts = cm.counts
    if cm.n == 0:
        raise EmptyCounts("confusion matrix has no observations")
    correct = int(np.trace(counts))
    accuracy = correct / cm.n
    precision, recall, f1 = {}, {}, {}
    for t in TIER_ORDER:
        i = int(t) - 1
        p = _safe_div(counts[i, i], counts[:, i].sum())
        r = _safe_div(counts[i, i], counts[i, :].sum())
        precision[t], recall[t] = p, r
        f1[t] = _safe_div(2 * p * r, p + r)
    ci = None
    if ci_method is not None:
        low, high = accuracy_ci(correct, cm.n, method=ci_method, level=level)
        ci = (low, high, ci_method)
    return MetricsReport(accuracy=accuracy,
                         per_tier_precision=precision,
                         per_tier_recall=recall,
                         per_tier_f1=f1,
                         macro_f1=sum(f1.values()) / 4.0,
                         predicted_counts=cm.predicted_counts(),
                         above_chance_pp=(accuracy - chance) * 100.0,
                         headroom=headroom(accuracy, chance),
                         n=cm.n, chance=chance, ci=ci)


def error_profile(preds: list[Tier], truths: list[Tier]) -> dict[str, int]:
    """Distance and direction breakdown of errors.

    under = predicted a worse tier than truth (code too high),
    over  = predicted a better tier than truth (code too low).
    """
    if len(preds) != len(truths):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(truths)} truths")
    profile = {"exact": 0, "off_by_1": 0, "off_by_2_plus": 0, "under": 0, "over": 0}
    for p, t in zip(preds, truths):
        d = abs(int(p) - int(t))
        if d == 0:
            profile["exact"] += 1
            continue
        profile["off_by_1" if d == 1 else "off_by_2_plus"] += 1
        profile["under" if int(p) > int(t) else "over"] += 1
    return profile


def prediction_entropy(predicted_counts: dict[Tier, int]) -> float:
    """Normalized entropy of the predicted-label histogram, in [0, 1]."""
    total = sum(predicted_counts.values())
    if total == 0:
        raise EmptyCounts("no predictions to take entropy over")
    h = 0.0
    for c in predicted_counts.values():
        if c > 0:
            p = c / total
            h -= p * math.log(p)
    return h / math.log(4.0)


# ---------------------------------------------------------------------------
# Accuracy confidence intervals


def accuracy_ci(k: int, n: int, method: str = "wilson",
                level: float = 0.95) -> tuple[float, float]:
    if n <= 0 or not 0 <= k <= n:
        raise EmptyCounts(f"bad counts k={k}, n={n}")
    if method == "wilson":
        from .stats import wilson_ci
        return wilson_ci(k, n, level=level)
    p = k / n
    if method == "normal":
        z = float(sps.norm.ppf(0.5 + level / 2.0))
        half = z * math.sqrt(p * (1 - p) / n)
        return max(0.0, p - half), min(1.0, p + half)
    if method == "clopper_pearson":
        alpha = 1.0 - level
        low = 0.0 if k == 0 else float(sps.beta.ppf(alpha / 2, k, n - k + 1))
        high = 1.0 if k == n else float(sps.beta.ppf(1 - alpha / 2, k + 1, n - k))
        return low, high
    raise EmptyCounts(f"unknown CI method: {method!r} (not one of {CI_METHODS})")


def macro_f1_bootstrap_ci(preds: list[Tier], truths: list[Tier],
                          draws: int = 10000, seed: int = 0,
                          level: float = 0.95) -> tuple[float, float]:
    """Percentile bootstrap over items for macro-F1 (the default for F1 CIs)."""
    from .stats import bootstrap_ci

    pairs = list(zip(preds, truths))

    def stat(sample: list[tuple[Tier, Tier]]) -> float:
        cm = confusion([p for p, _ in sample], [t for _, t in sample])
        return summarize(cm, chance=0.25).macro_f1

    return bootstrap_ci(stat, pairs, draws=draws, seed=seed, level=level)


# ---------------------------------------------------------------------------
# Flat table row (one evaluator per row, headline-table column layout)

TABLE_COLUMNS = [
    "model", "model_key", "n", "accuracy_pct", "macro_f1",
    "ci_low_pct", "ci_high_pct", "above_chance_pp", "headroom_pct",
    "acc_exceptional_pct", "acc_strong_pct", "acc_fair_pct", "acc_limited_pct",
    "pred_exceptional_n", "pred_strong_n", "pred_fair_n", "pred_limited_n",
]


def report_table_row(model: str, model_key: str, rep: MetricsReport) -> list:
    from .tiers import format_percent
    ci_low = format_percent(rep.ci[0]) if rep.ci else ""
    ci_high = format_percent(rep.ci[1]) if rep.ci else ""
    return [model, model_key, rep.n,
            format_percent(rep.accuracy), f"{rep.macro_f1:.3f}",
            ci_low, ci_high, format_percent(rep.above_chance_pp / 100.0),
            format_percent(rep.headroom),
            *[format_percent(rep.per_tier_recall[t]) for t in TIER_ORDER],
            *[rep.predicted_counts[t] for t in TIER_ORDER]]
