"""Agreement coefficients, exact and asymptotic tests, and seeded resampling.

Every stochastic routine takes an explicit seed and draws from
numpy's PCG64 (np.random.default_rng), the package-wide generator choice;
draw i of a resampling loop uses the substream seeded by (seed, i), so
results are independent of execution order and safe to parallelize.

Two-sided exact binomial p-values follow the summed-smaller-tail
(minimum-likelihood) definition. The Mann-Whitney test uses the
tie-corrected normal approximation without continuity correction, so a
zero-separation comparison reports exactly p = 0.5 one-sided.
"""

from __future__ import annotations

import itertools
import logging
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from .errors import (DegenerateMarginals, EmptyPitch, InsufficientData,
                     InsufficientRatings, LengthMismatch, NoVariation)
from .tiers import TIER_ORDER, Tier, ordinal_distance

log = logging.getLogger(__name__)


@dataclass
class TestResult:
    name: str
    statistic: float | None
    p: float
    sidedness: str
    n: int
    details: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {"name": self.name, "statistic": self.statistic, "p": self.p,
                "sidedness": self.sidedness, "n": self.n, "details": self.details}


# ---------------------------------------------------------------------------
# Agreement coefficients


def fleiss_kappa(ratings: dict[str, list[Tier]]) -> float:
    """Fleiss' kappa generalized to unequal raters per item.

    Items contribute sum_k n_ik(n_ik - 1) / (n_i(n_i - 1)); expected
    agreement uses the pooled label distribution. Items with fewer than two
    ratings are excluded (count logged).
    """
    usable = {pid: labels for pid, labels in ratings.items() if len(labels) >= 2}
    dropped = len(ratings) - len(usable)
    if dropped:
        log.info("fleiss_kappa: excluded %d items with < 2 ratings", dropped)
    if len(usable) < 2:
        raise InsufficientRatings(
            f"need >= 2 items with >= 2 ratings, have {len(usable)}")
    total_counts = Counter()
    p_bar = 0.0
    for labels in usable.values():
        n_i = len(labels)
        counts = Counter(labels)
        total_counts.update(counts)
        p_bar += sum(c * (c - 1) for c in counts.values()) / (n_i * (n_i - 1))
    p_bar /= len(usable)
    total = sum(total_counts.values())
    p_e = sum((c / total) ** 2 for c in total_counts.values())
    if p_e >= 1.0:
        raise NoVariation("all ratings carry a single label; kappa undefined")
    return (p_bar - p_e) / (1.0 - p_e)


def cohen_kappa(a: list[Tier], b: list[Tier]) -> float:
    """Cohen's kappa with chance agreement from the empirical marginals."""
    if len(a) != len(b):
        raise LengthMismatch(f"{len(a)} vs {len(b)} labels")
    if not a:
        raise InsufficientData("no paired labels")
    po = sum(x == y for x, y in zip(a, b)) / len(a)
    ca, cb = Counter(a), Counter(b)
    marg_a = [ca.get(t, 0) / len(a) for t in TIER_ORDER]
    marg_b = [cb.get(t, 0) / len(b) for t in TIER_ORDER]
    return cohen_kappa_from_agreement(po, marg_a, marg_b)


def cohen_kappa_from_agreement(po: float, marginals_a: list[float],
                               marginals_b: list[float]) -> float:
    """kappa = (po - pe) / (1 - pe) given observed agreement and marginals."""
    for name, m in (("a", marginals_a), ("b", marginals_b)):
        if len(m) != 4 or any(v < 0 for v in m):
            raise InsufficientData(f"marginals {name} must be four non-negative shares")
        if not math.isclose(sum(m), 1.0, rel_tol=0.0, abs_tol=1e-2):
            raise InsufficientData(f"marginals {name} sum to {sum(m)!r}")
    pe = sum(x * y for x, y in zip(marginals_a, marginals_b))
    if pe >= 1.0:
        raise DegenerateMarginals("both raters constant on one label; kappa undefined")
    return (po - pe) / (1.0 - pe)


def krippendorff_alpha_ordinal(ratings: dict[str, list[Tier]]) -> float:
    """Krippendorff's alpha with the ordinal difference function.

    Built on the coincidence matrix: each unit with m >= 2 pairable values
    contributes its value pairs weighted by 1/(m - 1). The ordinal
    difference between codes c < k is the squared sum of margin totals from
    c through k minus half the two endpoints' margins.
    """
    usable = [labels for labels in ratings.values() if len(labels) >= 2]
    if not usable:
        raise InsufficientData("no unit has >= 2 ratings")
    codes = [int(t) for t in TIER_ORDER]
    o = np.zeros((4, 4), dtype=float)
    for labels in usable:
        m = len(labels)
        counts = Counter(int(t) for t in labels)
        for c in counts:
            for k in counts:
                pairs = counts[c] * (counts[k] - 1) if c == k else counts[c] * counts[k]
                o[c - 1, k - 1] += pairs / (m - 1)
    margins = o.sum(axis=1)
    n = margins.sum()
    if len([c for c in codes if margins[c - 1] > 0]) < 2:
        raise NoVariation("all pairable ratings share one label; alpha undefined")

    def delta_sq(c: int, k: int) -> float:
        lo, hi = min(c, k), max(c, k)
        inner = sum(margins[g - 1] for g in range(lo, hi + 1))
        return (inner - (margins[c - 1] + margins[k - 1]) / 2.0) ** 2

    d_obs = 0.0
    d_exp = 0.0
    for c in codes:
        for k in codes:
            if c >= k:
                continue
            d2 = delta_sq(c, k)
            d_obs += o[c - 1, k - 1] * d2
            d_exp += margins[c - 1] * margins[k - 1] * d2
    if d_exp == 0.0:
        raise NoVariation("expected disagreement is zero; alpha undefined")
    return 1.0 - (n - 1) * d_obs / d_exp


@dataclass
class AgreementReport:
    fleiss_kappa: float | None = None
    krippendorff_alpha: float | None = None
    pairwise_cohen: dict[tuple[str, str], float] = field(default_factory=dict)
    mean_ordinal_distance: dict[tuple[str, str], float] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "fleiss_kappa": self.fleiss_kappa,
            "krippendorff_alpha": self.krippendorff_alpha,
            "pairwise_cohen": {f"{a}::{b}": v
                               for (a, b), v in sorted(self.pairwise_cohen.items())},
            "mean_ordinal_distance": {f"{a}::{b}": v for (a, b), v
                                      in sorted(self.mean_ordinal_distance.items())},
        }


def agreement_report(per_pitch_ratings: dict[str, list[Tier]] | None = None,
                     labels_by_evaluator: dict[str, dict[str, Tier]] | None = None
                     ) -> AgreementReport:
    """Panel-level kappa/alpha plus pairwise inter-evaluator agreement."""
    report = AgreementReport()
    if per_pitch_ratings:
        try:
            report.fleiss_kappa = fleiss_kappa(per_pitch_ratings)
        except (InsufficientRatings, NoVariation) as exc:
            log.info("fleiss kappa unavailable: %s", exc)
        try:
            report.krippendorff_alpha = krippendorff_alpha_ordinal(per_pitch_ratings)
        except (InsufficientData, NoVariation) as exc:
            log.info("krippendorff alpha unavailable: %s", exc)
    if labels_by_evaluator:
        for a, b in itertools.combinations(sorted(labels_by_evaluator), 2):
            shared = sorted(set(labels_by_evaluator[a]) & set(labels_by_evaluator[b]))
            if not shared:
                continue
            va = [labels_by_evaluator[a][pid] for pid in shared]
            vb = [labels_by_evaluator[b][pid] for pid in shared]
            try:
                report.pairwise_cohen[(a, b)] = cohen_kappa(va, vb)
            except DegenerateMarginals as exc:
                log.info("cohen kappa %s vs %s unavailable: %s", a, b, exc)
            report.mean_ordinal_distance[(a, b)] = (
                sum(ordinal_distance(x, y) for x, y in zip(va, vb)) / len(shared))
    return report


# ---------------------------------------------------------------------------
# Exact and asymptotic tests


def binomial_test(k: int, n: int, p0: float, sided: str = "two_sided") -> TestResult:
    """Exact binomial test by tail summation.

    Two-sided p sums every outcome whose point probability does not exceed
    that of k (with a 1e-7 relative guard against float noise), the
    summed-smaller-tails definition.
    """
    if n < 1 or not 0 <= k <= n:
        raise InsufficientData(f"bad counts k={k}, n={n}")
    if not 0.0 <= p0 <= 1.0:
        raise InsufficientData(f"p0 must be in [0, 1], got {p0}")
    support = np.arange(n + 1)
    pmf = sps.binom.pmf(support, n, p0)
    if sided == "greater":
        p = float(pmf[k:].sum())
    elif sided == "less":
        p = float(pmf[:k + 1].sum())
    elif sided == "two_sided":
        p = float(pmf[pmf <= pmf[k] * (1 + 1e-7)].sum())
    else:
        raise InsufficientData(f"unknown sidedness: {sided!r}")
    return TestResult(name="binomial_exact", statistic=float(k), p=min(p, 1.0),
                      sidedness=sided, n=n, details={"p0": p0})


def mcnemar_from_counts(b: int, c: int, mode: str = "exact") -> TestResult:
    """McNemar's test on discordant counts (b: first-only, c: second-only)."""
    if b < 0 or c < 0:
        raise InsufficientData(f"discordant counts must be >= 0, got b={b}, c={c}")
    n_disc = b + c
    details = {"b": b, "c": c}
    if mode == "exact":
        if n_disc == 0:
            return TestResult("mcnemar_exact", None, 1.0, "two_sided", 0, details)
        inner = binomial_test(min(b, c), n_disc, 0.5, sided="two_sided")
        return TestResult("mcnemar_exact", None, inner.p, "two_sided",
                          n_disc, details)
    if mode == "cc":
        if n_disc == 0:
            return TestResult("mcnemar_cc", None, 1.0, "two_sided", 0, details)
        stat = (abs(b - c) - 1) ** 2 / n_disc
        p = float(sps.chi2.sf(stat, df=1))
        return TestResult("mcnemar_cc", stat, p, "two_sided", n_disc, details)
    raise InsufficientData(f"unknown mcnemar mode: {mode!r}")


def mcnemar(correct_a: list[bool], correct_b: list[bool],
            mode: str = "exact") -> TestResult:
    """Paired comparison of two evaluators' per-item correctness."""
    if len(correct_a) != len(correct_b):
        raise LengthMismatch(f"{len(correct_a)} vs {len(correct_b)} outcomes")
    b = sum(1 for x, y in zip(correct_a, correct_b) if x and not y)
    c = sum(1 for x, y in zip(correct_a, correct_b) if y and not x)
    result = mcnemar_from_counts(b, c, mode=mode)
    result.details["n_items"] = len(correct_a)
    return result


def wilson_ci(k: int, n: int, level: float = 0.95) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if n < 1 or not 0 <= k <= n:
        raise InsufficientData(f"bad counts k={k}, n={n}")
    z = float(sps.norm.ppf(0.5 + level / 2.0))
    p_hat = k / n
    denom = 1.0 + z * z / n
    center = (p_hat + z * z / (2 * n)) / denom
    half = (z / denom) * math.sqrt(p_hat * (1 - p_hat) / n + z * z / (4 * n * n))
    low = 0.0 if k == 0 else max(0.0, center - half)
    high = 1.0 if k == n else min(1.0, center + half)
    return low, high


def holm_adjust(p_values: list[float]) -> list[float]:
    """Holm step-down adjusted p-values, in the input order."""
    m = len(p_values)
    order = sorted(range(m), key=lambda i: p_values[i])
    adjusted = [0.0] * m
    running = 0.0
    for rank, idx in enumerate(order):
        running = max(running, (m - rank) * p_values[idx])
        adjusted[idx] = min(1.0, running)
    return adjusted


# ---------------------------------------------------------------------------
# Rank-based tests


def _rank_with_ties(values: np.ndarray) -> tuple[np.ndarray, float]:
    """Average ranks plus the tie-correction sum sum(t^3 - t)."""
    ranks = sps.rankdata(values, method="average")
    tie_sum = sum(t ** 3 - t for t in Counter(values.tolist()).values())
    return ranks, tie_sum


def spearman_perm(x: list[float], y: list[float], draws: int = 10000,
                  seed: int = 0, sided: str = "two_sided") -> TestResult:
    """Spearman rho with a seeded permutation p-value.

    p = (1 + #{permutations at least as extreme}) / (1 + draws).
    """
    if len(x) != len(y):
        raise LengthMismatch(f"{len(x)} vs {len(y)} values")
    if len(x) < 3:
        raise InsufficientData("need >= 3 pairs")
    rx = sps.rankdata(x, method="average")
    ry = sps.rankdata(y, method="average")
    if np.std(rx) == 0 or np.std(ry) == 0:
        raise InsufficientData("a constant vector has no rank correlation")
    cx = (rx - rx.mean()) / (np.std(rx) * math.sqrt(len(x)))
    cy = (ry - ry.mean()) / (np.std(ry) * math.sqrt(len(y)))
    rho = float(np.dot(cx, cy))
    hits = 0
    for i in range(draws):
        rng = np.random.default_rng([seed, i])
        rho_p = float(np.dot(cx, rng.permutation(cy)))
        if sided == "two_sided":
            hits += abs(rho_p) >= abs(rho) - 1e-12
        elif sided == "greater":
            hits += rho_p >= rho - 1e-12
        elif sided == "less":
            hits += rho_p <= rho + 1e-12
        else:
            raise InsufficientData(f"unknown sidedness: {sided!r}")
    p = (1 + hits) / (1 + draws)
    return TestResult("spearman_perm", rho, p, sided, len(x),
                      details={"draws": draws, "seed": seed})


def mann_whitney(x: list[float], y: list[float],
                 sided: str = "two_sided") -> TestResult:
    """Mann-Whitney U, tie-corrected normal approximation, no continuity
    correction; "greater" tests whether x is stochastically larger."""
    n1, n2 = len(x), len(y)
    if n1 == 0 or n2 == 0:
        raise InsufficientData("both samples must be non-empty")
    combined = np.asarray(list(x) + list(y), dtype=float)
    ranks, tie_sum = _rank_with_ties(combined)
    u = float(ranks[:n1].sum()) - n1 * (n1 + 1) / 2.0
    mean_u = n1 * n2 / 2.0
    n = n1 + n2
    var_u = n1 * n2 / 12.0 * ((n + 1) - tie_sum / (n * (n - 1)))
    z = 0.0 if var_u <= 0 else (u - mean_u) / math.sqrt(var_u)
    if sided == "greater":
        p = float(sps.norm.sf(z))
    elif sided == "less":
        p = float(sps.norm.cdf(z))
    elif sided == "two_sided":
        p = min(1.0, 2.0 * float(sps.norm.sf(abs(z))))
    else:
        raise InsufficientData(f"unknown sidedness: {sided!r}")
    return TestResult("mann_whitney_u", u, p, sided, n,
                      details={"z": z, "n1": n1, "n2": n2})


def kruskal_wallis(groups: list[list[float]]) -> TestResult:
    """Kruskal-Wallis H with tie correction, chi-square p on k - 1 df."""
    if len(groups) < 2 or any(len(g) == 0 for g in groups):
        raise InsufficientData("need >= 2 non-empty groups")
    combined = np.asarray([v for g in groups for v in g], dtype=float)
    n = len(combined)
    ranks, tie_sum = _rank_with_ties(combined)
    h = 0.0
    offset = 0
    for g in groups:
        r = ranks[offset:offset + len(g)].sum()
        h += r * r / len(g)
        offset += len(g)
    h = 12.0 / (n * (n + 1)) * h - 3.0 * (n + 1)
    correction = 1.0 - tie_sum / (n ** 3 - n)
    if correction <= 0:
        h, p = 0.0, 1.0  # every observation identical
    else:
        h /= correction
        p = float(sps.chi2.sf(h, df=len(groups) - 1))
    return TestResult("kruskal_wallis", h, p, "two_sided", n,
                      details={"k": len(groups)})


def cochran_q(matrix: list[list[bool]]) -> TestResult:
    """Cochran's Q over an items x evaluators 0/1 matrix.

    Complete per-item agreement (every row all-0 or all-1) carries no
    discordance, reported as Q = 0, p = 1.
    """
    if not matrix:
        raise InsufficientData("empty correctness matrix")
    k = len(matrix[0])
    if k < 2 or any(len(row) != k for row in matrix):
        raise InsufficientData("need a rectangular matrix with >= 2 columns")
    arr = np.asarray(matrix, dtype=int)
    col = arr.sum(axis=0)
    row = arr.sum(axis=1)
    total = int(arr.sum())
    denom = k * total - int((row * row).sum())
    if denom == 0:
        return TestResult("cochran_q", 0.0, 1.0, "two_sided", len(matrix),
                          details={"k": k})
    q = (k - 1) * (k * int((col * col).sum()) - total * total) / denom
    p = float(sps.chi2.sf(q, df=k - 1))
    return TestResult("cochran_q", q, p, "two_sided", len(matrix),
                      details={"k": k})


def t_one_sample(values: list[float], ref: float,
                 sided: str = "two_sided") -> TestResult:
    if len(values) < 2:
        raise InsufficientData("need >= 2 values")
    arr = np.asarray(values, dtype=float)
    sd = float(arr.std(ddof=1))
    if sd == 0.0:
        raise InsufficientData("zero variance; t statistic undefined")
    t = (float(arr.mean()) - ref) / (sd / math.sqrt(len(arr)))
    df = len(arr) - 1
    if sided == "greater":
        p = float(sps.t.sf(t, df))
    elif sided == "less":
        p = float(sps.t.cdf(t, df))
    elif sided == "two_sided":
        p = min(1.0, 2.0 * float(sps.t.sf(abs(t), df)))
    else:
        raise InsufficientData(f"unknown sidedness: {sided!r}")
    return TestResult("t_one_sample", t, p, sided, len(values),
                      details={"ref": ref})


_RANK_MODES = {
    "spearman": spearman_perm,
    "mann_whitney": mann_whitney,
    "kruskal_wallis": kruskal_wallis,
    "cochran_q": cochran_q,
    "t_one_sample": t_one_sample,
}


def rank_tests(mode: str, *args, **kwargs) -> TestResult:
    """Dispatch to one of the rank/score tests by mode name."""
    if mode not in _RANK_MODES:
        raise InsufficientData(
            f"unknown mode {mode!r}; choose from {sorted(_RANK_MODES)}")
    return _RANK_MODES[mode](*args, **kwargs)


# ---------------------------------------------------------------------------
# Seeded resampling


def bootstrap_ci(statistic, data, draws: int = 10000, seed: int = 0,
                 level: float = 0.95) -> tuple[float, float]:
    """Percentile bootstrap interval for statistic(list) over item resamples.

    Draw i resamples with the substream (seed, i), so any execution order
    (or parallel split) reproduces the serial result bit for bit.
    """
    items = list(data)
    if not items:
        raise InsufficientData("no data to resample")
    if draws < 1:
        raise InsufficientData("need >= 1 draw")
    n = len(items)
    values = np.empty(draws, dtype=float)
    for i in range(draws):
        rng = np.random.default_rng([seed, i])
        idx = rng.integers(0, n, size=n)
        values[i] = statistic([items[j] for j in idx])
    # percent positions built so the default level lands on exactly
    # [2.5, 97.5]; 100*(1-level)/2 would drift an ulp and shift the
    # interpolated percentile
    tail = (100.0 - 100.0 * level) / 2.0
    low, high = np.percentile(values, [tail, 100.0 - tail])
    return float(low), float(high)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class SubsampleReport:
    draws: int
    target_raters_per_pitch: float
    mean_accuracy: float
    ci: tuple[float, float]
    mean_effective_n: float

    def to_json_dict(self) -> dict:
        return {"draws": self.draws,
                "target_raters_per_pitch": self.target_raters_per_pitch,
                "mean_accuracy": self.mean_accuracy,
                "ci": {"low": self.ci[0], "high": self.ci[1]},
                "mean_effective_n": self.mean_effective_n}


def _panel_accuracy(selections: list[tuple[str, list[Tier]]],
                    truths: dict[str, Tier]) -> tuple[float, int]:
    correct = 0
    effective = 0
    for pid, labels in selections:
        counts = Counter(labels)
        best = max(counts.values())
        modal = sorted(t for t, c in counts.items() if c == best)
        if len(modal) != 1:
            continue  # tied pitch drops out of the denominator
        effective += 1
        correct += modal[0] == truths[pid]
    return (correct / effective if effective else 0.0), effective


def matched_n_subsample(ratings: dict[str, list[Tier]], truths: dict[str, Tier],
                        target_raters_per_pitch: float, draws: int = 5000,
                        seed: int = 0, exhaustive: bool = False
                        ) -> SubsampleReport:
    """Majority accuracy when panels are thinned to a matched size.

    Each draw samples min(available, round(target)) ratings per pitch
    without replacement, takes the per-pitch majority (ties excluded), and
    scores accuracy over the surviving pitches. Reports the mean, a
    percentile interval over draws, and the mean effective N.

    exhaustive=True replaces sampling with full enumeration of every
    per-pitch rater subset combination (small fixtures only).
    """
    if not ratings:
        raise InsufficientData("no pitches")
    for pid, labels in ratings.items():
        if not labels:
            raise EmptyPitch(f"pitch {pid!r} has no ratings")
        if pid not in truths:
            raise InsufficientData(f"no truth for pitch {pid!r}")
    m_target = _round_half_up(target_raters_per_pitch)
    if m_target < 1:
        raise InsufficientData(f"target raters must round to >= 1, "
                               f"got {target_raters_per_pitch}")
    pitch_ids = sorted(ratings)

    if exhaustive:
        per_pitch_subsets = []
        total = 1
        for pid in pitch_ids:
            labels = ratings[pid]
            m = min(len(labels), m_target)
            subsets = [list(combo) for combo in
                       itertools.combinations(labels, m)]
            total *= len(subsets)
            if total > 250_000:
                raise InsufficientData("exhaustive enumeration too large")
            per_pitch_subsets.append(subsets)
        accs = []
        effs = []
        for combo in itertools.product(*per_pitch_subsets):
            acc, eff = _panel_accuracy(list(zip(pitch_ids, combo)), truths)
            accs.append(acc)
            effs.append(eff)
        values = np.asarray(accs, dtype=float)
        low, high = np.percentile(values, [2.5, 97.5])
        return SubsampleReport(draws=len(accs),
                               target_raters_per_pitch=target_raters_per_pitch,
                               mean_accuracy=float(values.mean()),
                               ci=(float(low), float(high)),
                               mean_effective_n=float(np.mean(effs)))

    accs = np.empty(draws, dtype=float)
    effs = np.empty(draws, dtype=float)
    for d in range(draws):
        rng = np.random.default_rng([seed, d])
        selections = []
        for pid in pitch_ids:
            labels = ratings[pid]
            m = min(len(labels), m_target)
            idx = rng.choice(len(labels), size=m, replace=False)
            selections.append((pid, [labels[j] for j in idx]))
        accs[d], effs[d] = _panel_accuracy(selections, truths)
    low, high = np.percentile(accs, [2.5, 97.5])
    return SubsampleReport(draws=draws,
                           target_raters_per_pitch=target_raters_per_pitch,
                           mean_accuracy=float(accs.mean()),
                           ci=(float(low), float(high)),
                           mean_effective_n=float(effs.mean()))
