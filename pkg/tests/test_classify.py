import math
import random

import pytest

from tierbench.classify import (
    LabelDistribution,
    aggregate_runs,
    classify_logprob,
    majority_accuracy,
    parse_label_text,
    pitch_mean_accuracy,
    runs_majority,
)
from tierbench.errors import EmptyLogprobs, LengthMismatch
from tierbench.tiers import TIER_ORDER, Tier


def softmax_oracle(logprobs):
    """Independent route: direct exp / sum(exp) without max-shift."""
    exps = {t: math.exp(lp) for t, lp in logprobs.items()}
    total = sum(exps.values())
    return {t: e / total for t, e in exps.items()}


class TestLabelDistribution:
    def test_needs_four(self):
        with pytest.raises(LengthMismatch):
            LabelDistribution((0.5, 0.5))

    def test_must_sum_to_one(self):
        with pytest.raises(LengthMismatch):
            LabelDistribution((0.5, 0.5, 0.1, 0.0))

    def test_nonnegative(self):
        with pytest.raises(LengthMismatch):
            LabelDistribution((1.2, -0.2, 0.0, 0.0))

    def test_prob_indexing(self):
        d = LabelDistribution((0.1, 0.2, 0.3, 0.4))
        assert d.prob(Tier.EXCEPTIONAL) == 0.1
        assert d.prob(Tier.LIMITED) == 0.4

    def test_dict_roundtrip(self):
        d = LabelDistribution((0.1, 0.2, 0.3, 0.4))
        assert LabelDistribution.from_dict(d.as_dict()) == d

    def test_from_dict_fills_zero(self):
        d = LabelDistribution.from_dict({Tier.STRONG: 1.0})
        assert d.probabilities == (0.0, 1.0, 0.0, 0.0)

    def test_argmax_tie_lowest_code(self):
        d = LabelDistribution((0.4, 0.4, 0.2, 0.0))
        label, tied = d.argmax()
        assert label is Tier.EXCEPTIONAL
        assert tied


class TestClassifyLogprob:
    # Frozen reference: softmax of (-1, -2, -3, -4) computed by hand from
    # exp(-k) sums, cross-checked against the direct-exponentiation route.
    FIXTURE = {Tier.EXCEPTIONAL: -1.0, Tier.STRONG: -2.0,
               Tier.FAIR: -3.0, Tier.LIMITED: -4.0}
    EXPECTED = (0.6439142598879724, 0.23688281808991013,
                0.08714431874203257, 0.03205860328008499)

    def test_fixture_probabilities(self):
        pred = classify_logprob(self.FIXTURE, pitch_id="p0")
        for got, want in zip(pred.distribution.probabilities, self.EXPECTED):
            assert got == pytest.approx(want, abs=1e-15)
        assert pred.label is Tier.EXCEPTIONAL
        assert pred.confidence == pred.distribution.probabilities[0]
        assert not pred.tie_broken
        assert pred.pitch_id == "p0"

    def test_shift_invariance(self):
        base = classify_logprob(self.FIXTURE)
        shifted = classify_logprob({t: lp + 123.456 for t, lp in self.FIXTURE.items()})
        for a, b in zip(base.distribution.probabilities,
                        shifted.distribution.probabilities):
            assert a == pytest.approx(b, abs=1e-12)

    def test_missing_tier_probability_exactly_zero(self):
        pred = classify_logprob({Tier.STRONG: -0.5, Tier.FAIR: -1.5})
        assert pred.distribution.prob(Tier.EXCEPTIONAL) == 0.0
        assert pred.distribution.prob(Tier.LIMITED) == 0.0
        assert pred.label is Tier.STRONG

    def test_large_magnitudes_do_not_overflow(self):
        pred = classify_logprob({t: 1000.0 - int(t) for t in TIER_ORDER})
        assert math.isfinite(pred.confidence)
        assert pred.label is Tier.EXCEPTIONAL

    def test_empty_raises(self):
        with pytest.raises(EmptyLogprobs):
            classify_logprob({})

    def test_all_minus_inf_raises(self):
        with pytest.raises(EmptyLogprobs):
            classify_logprob({Tier.FAIR: -math.inf})

    def test_exact_tie_breaks_to_lowest_code(self):
        pred = classify_logprob({Tier.STRONG: -1.0, Tier.LIMITED: -1.0})
        assert pred.label is Tier.STRONG
        assert pred.tie_broken

    def test_matches_direct_oracle_randomized(self):
        rnd = random.Random(7)
        for _ in range(300):
            lps = {t: rnd.uniform(-30, 2) for t in TIER_ORDER}
            want = softmax_oracle(lps)
            pred = classify_logprob(lps)
            for t in TIER_ORDER:
                assert pred.distribution.prob(t) == pytest.approx(want[t], abs=1e-12)
            best = min(TIER_ORDER, key=lambda t: (-lps[t], int(t)))
            assert pred.label is best


class TestParseLabelText:
    @pytest.mark.parametrize("raw,want", [
        ("Strong", Tier.STRONG),
        ("  strong\n", Tier.STRONG),
        ("**Exceptional**", Tier.EXCEPTIONAL),
        ("*fair*", Tier.FAIR),
        ("`limited`", Tier.LIMITED),
        ("# Strong", Tier.STRONG),
        ("> limited.", Tier.LIMITED),
        ("Fair.", Tier.FAIR),
        ('"Strong"', Tier.STRONG),
        ("LIMITED!", Tier.LIMITED),
        ("__Str_ong__", Tier.STRONG),  # markdown chars removed everywhere
    ])
    def test_resolves(self, raw, want):
        assert parse_label_text(raw) is want

    @pytest.mark.parametrize("raw", [
        "The idea is strong.",
        "strongly",
        "Tier 2",
        "Strong potential",
        "",
        "   ",
        "fairness",
        "top",
    ])
    def test_unresolved(self, raw):
        assert parse_label_text(raw) is None


class TestRunAggregation:
    def test_majority_plurality(self):
        runs = [Tier.STRONG, Tier.STRONG, Tier.FAIR, None]
        assert runs_majority(runs) == (Tier.STRONG, False)

    def test_majority_tie(self):
        runs = [Tier.STRONG, Tier.FAIR, None, None]
        assert runs_majority(runs) == (None, True)

    def test_majority_all_unresolved(self):
        assert runs_majority([None, None]) == (None, True)
        assert runs_majority([]) == (None, True)

    def test_unresolved_never_wins(self):
        # seven unresolved cannot outvote one resolved run
        runs = [None] * 7 + [Tier.LIMITED]
        assert runs_majority(runs) == (Tier.LIMITED, False)

    def test_aggregate_counts(self):
        runs = [Tier.STRONG, Tier.STRONG, Tier.FAIR, None]
        agg = aggregate_runs(runs, truth=Tier.STRONG, pitch_id="p1")
        assert agg.n_runs == 4
        assert agg.n_correct == 2
        assert agg.majority is Tier.STRONG
        assert not agg.tied
        assert agg.fraction_correct() == 0.5

    def test_aggregate_empty_raises(self):
        with pytest.raises(LengthMismatch):
            aggregate_runs([], truth=Tier.FAIR)

    def test_pitch_mean_accuracy(self):
        a = aggregate_runs([Tier.FAIR] * 4, Tier.FAIR, "a")
        b = aggregate_runs([Tier.FAIR, None, None, None], Tier.FAIR, "b")
        assert pitch_mean_accuracy([a, b]) == pytest.approx(0.625)
        with pytest.raises(LengthMismatch):
            pitch_mean_accuracy([])

    def test_majority_accuracy_skips_ties(self):
        truths = {"a": Tier.FAIR, "b": Tier.FAIR, "c": Tier.STRONG}
        aggs = [
            aggregate_runs([Tier.FAIR, Tier.FAIR], Tier.FAIR, "a"),
            aggregate_runs([Tier.FAIR, Tier.STRONG], Tier.FAIR, "b"),  # tied
            aggregate_runs([Tier.FAIR, Tier.FAIR], Tier.STRONG, "c"),
        ]
        acc, n = majority_accuracy(aggs, truths)
        assert n == 2
        assert acc == 0.5

    def test_majority_accuracy_all_tied(self):
        truths = {"a": Tier.FAIR}
        aggs = [aggregate_runs([Tier.FAIR, Tier.STRONG], Tier.FAIR, "a")]
        assert majority_accuracy(aggs, truths) == (0.0, 0)
