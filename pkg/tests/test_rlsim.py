import math

import numpy as np
import pytest

from tierbench.errors import (GroupTooSmall, LengthMismatch, NonFiniteRatio,
                              SchemaError, WrongDiagnosticCount)
from tierbench.rlsim import (
    ClipParams,
    GroupRollout,
    RewardSpec,
    RolloutOutput,
    RouterConfig,
    ToyPolicy,
    TrainConfig,
    grpo_loss,
    normalize_advantages,
    reward,
    route_privileged,
    run_training,
    toy_rollout,
)
from tierbench.tiers import TIER_ORDER, Tier

E, S, F, L = Tier.EXCEPTIONAL, Tier.STRONG, Tier.FAIR, Tier.LIMITED


class TestRewardSpec:
    def test_defaults(self):
        spec = RewardSpec()
        assert (spec.exact, spec.adjacent, spec.far) == (1.0, 0.3, 0.0)

    def test_ordering_enforced(self):
        with pytest.raises(SchemaError):
            RewardSpec(exact=0.5, adjacent=0.8)
        with pytest.raises(SchemaError):
            RewardSpec(adjacent=-0.1, far=0.0)


class TestReward:
    def test_exhaustive_contract(self):
        # every (final, reasoning, truth) combination against the definition
        options = list(TIER_ORDER) + [None]
        for final in options:
            for reasoning in options:
                for truth in TIER_ORDER:
                    got = reward(final, reasoning, truth)
                    if final is None or final != reasoning:
                        want = 0.0
                    else:
                        d = abs(int(final) - int(truth))
                        want = 1.0 if d == 0 else (0.3 if d == 1 else 0.0)
                    assert got == want, (final, reasoning, truth)

    def test_consistency_gate_blocks_correct_answer(self):
        # right final label, different reasoning label: no reward at all
        assert reward(S, F, S) == 0.0
        assert reward(S, None, S) == 0.0
        assert reward(S, S, S) == 1.0

    def test_custom_spec(self):
        spec = RewardSpec(exact=2.0, adjacent=0.5, far=0.1)
        assert reward(E, E, L, spec) == 0.1
        assert reward(E, E, S, spec) == 0.5


class TestAdvantages:
    def test_frozen_fixture(self):
        # rewards (1, .3, 0, .3): mean .4, population std sqrt(.135)
        adv = normalize_advantages([1.0, 0.3, 0.0, 0.3])
        want = (1.6329931174110088, -0.27216551956850155,
                -1.088662078274006, -0.27216551956850155)
        for got, exp in zip(adv, want):
            assert got == pytest.approx(exp, abs=1e-12)

    def test_uniform_rewards_vanish(self):
        # zero spread: the floor keeps division finite and sends all to 0
        assert normalize_advantages([0.3] * 8) == [0.0] * 8

    def test_mean_zero(self, rng):
        for _ in range(20):
            rewards = rng.uniform(0, 1, size=int(rng.integers(2, 12))).tolist()
            adv = normalize_advantages(rewards)
            assert sum(adv) == pytest.approx(0.0, abs=1e-9)

    def test_group_too_small(self):
        with pytest.raises(GroupTooSmall):
            normalize_advantages([1.0])


class TestRouting:
    def test_strict_threshold(self):
        config = RouterConfig(k=8, tau=0.25)
        flags_below = [True] + [False] * 7          # 1/8 < 0.25
        flags_at = [True, True] + [False] * 6       # 2/8 == 0.25
        flags_above = [True] * 3 + [False] * 5
        got = route_privileged([flags_below, flags_at, flags_above], config)
        assert got == [True, False, False]

    def test_all_wrong_is_privileged(self):
        assert route_privileged([[False] * 8]) == [True]

    def test_wrong_count(self):
        with pytest.raises(WrongDiagnosticCount):
            route_privileged([[True, False]], RouterConfig(k=8))

    def test_config_validation(self):
        with pytest.raises(SchemaError):
            RouterConfig(k=0)
        with pytest.raises(SchemaError):
            RouterConfig(tau=1.5)


class TestClipParams:
    def test_asymmetric_band(self):
        clip = ClipParams(eps=0.2, eps_higher=0.1)
        assert clip.low == pytest.approx(0.8)
        assert clip.high == pytest.approx(1.3)

    def test_validation(self):
        with pytest.raises(SchemaError):
            ClipParams(eps=0.0)
        with pytest.raises(SchemaError):
            ClipParams(eps=1.0)
        with pytest.raises(SchemaError):
            ClipParams(eps_higher=-0.1)


def single_token_output(ratio: float, tok: int = 0) -> RolloutOutput:
    ref = -1.0
    return RolloutOutput(tokens=(tok,), policy_logprobs=(ref + math.log(ratio),),
                         ref_logprobs=(ref,), final_label=Tier(tok + 1),
                         reasoning_label=Tier(tok + 1), reward=0.0)


def group_of(outputs) -> GroupRollout:
    return GroupRollout(prompt_id="p", bucket="p", hint=None, truth=E,
                        outputs=list(outputs))


class TestGrpoLoss:
    def test_all_four_clip_regimes(self):
        group = group_of([single_token_output(0.5), single_token_output(1.5)])
        # positive advantage below band is NOT clipped up; negative advantage
        # above band is NOT clipped down (min keeps the pessimistic term)
        loss, terms = grpo_loss(group, [1.0, -1.0])
        assert terms == [[pytest.approx(0.5)], [pytest.approx(-1.5)]]
        assert loss == pytest.approx(-(0.5 - 1.5) / 2)
        # negative advantage below band clips to -0.8; positive above to 1.3
        loss, terms = grpo_loss(group, [-1.0, 1.0])
        assert terms == [[pytest.approx(-0.8)], [pytest.approx(1.3)]]
        assert loss == pytest.approx(-(-0.8 + 1.3) / 2)

    def test_in_band_ratio_passes_through(self):
        group = group_of([single_token_output(1.0), single_token_output(1.1)])
        loss, terms = grpo_loss(group, [2.0, -0.5])
        assert terms[0][0] == pytest.approx(2.0)
        assert terms[1][0] == pytest.approx(-0.55)

    def test_token_level_normalization(self):
        short = single_token_output(1.0)
        long = RolloutOutput(tokens=(0, 0, 0), policy_logprobs=(-1.0,) * 3,
                             ref_logprobs=(-1.0,) * 3, final_label=E,
                             reasoning_label=E, reward=0.0)
        loss, _ = grpo_loss(group_of([short, long]), [1.0, 1.0])
        # 4 tokens total, terms 1 + 3*1: loss = -4/4
        assert loss == pytest.approx(-1.0)

    def test_advantage_length_check(self):
        group = group_of([single_token_output(1.0), single_token_output(1.0)])
        with pytest.raises(LengthMismatch):
            grpo_loss(group, [1.0])

    def test_group_too_small(self):
        with pytest.raises(GroupTooSmall):
            grpo_loss(group_of([single_token_output(1.0)]), [1.0])

    def test_nonfinite_ratio(self):
        bad = RolloutOutput(tokens=(0,), policy_logprobs=(0.0,),
                            ref_logprobs=(-math.inf,), final_label=E,
                            reasoning_label=E, reward=0.0)
        with pytest.raises(NonFiniteRatio):
            grpo_loss(group_of([bad, single_token_output(1.0)]), [1.0, 1.0])

    def test_overflowing_finite_gap(self):
        bad = RolloutOutput(tokens=(0,), policy_logprobs=(0.0,),
                            ref_logprobs=(-800.0,), final_label=E,
                            reasoning_label=E, reward=0.0)
        with pytest.raises(NonFiniteRatio):
            grpo_loss(group_of([bad, single_token_output(1.0)]), [1.0, 1.0])


class TestToyPolicy:
    def test_logits_validation(self):
        with pytest.raises(SchemaError):
            ToyPolicy(logits={("b", 0): np.zeros(3)})
        with pytest.raises(SchemaError):
            ToyPolicy(logits={("b", 0): np.array([1.0, np.nan, 0.0, 0.0])})
        with pytest.raises(SchemaError):
            ToyPolicy(token_count=0)

    def test_log_probs_normalized(self):
        policy = ToyPolicy(logits={("b", 0): np.array([2.0, 0.0, -1.0, 0.5])})
        lp = policy.log_probs("b", 0, hint=None)
        assert np.exp(lp).sum() == pytest.approx(1.0)

    def test_missing_bucket_is_uniform(self):
        policy = ToyPolicy()
        lp = policy.log_probs("unseen", 0, hint=None)
        assert np.allclose(np.exp(lp), 0.25)

    def test_hint_shifts_mass_additively(self):
        base = np.array([0.3, -0.2, 0.1, 0.0])
        policy = ToyPolicy(logits={("b", 0): base.copy()}, hint_strength=2.0)
        eff = policy.effective_logits("b", 0, hint=F)
        assert eff[2] == pytest.approx(base[2] + 2.0)
        assert np.allclose(np.delete(eff, 2), np.delete(base, 2))
        p_hinted = np.exp(policy.log_probs("b", 0, hint=F))
        p_plain = np.exp(policy.log_probs("b", 0, hint=None))
        assert p_hinted[2] > p_plain[2]


class TestToyRollout:
    def test_reference_snapshot_makes_ratios_one(self, rng):
        policy = ToyPolicy(logits={("p", 0): rng.normal(size=4)}, token_count=1)
        group = toy_rollout(policy, ("p",), g=6, seed=3, truth=S)
        for out in group.outputs:
            assert out.policy_logprobs == out.ref_logprobs
        loss, terms = grpo_loss(group, [1.0] * 6)
        assert all(t == pytest.approx(1.0) for row in terms for t in row)

    def test_labels_from_first_and_last_token(self):
        policy = ToyPolicy(token_count=3)
        group = toy_rollout(policy, ("p",), g=8, seed=1, truth=S)
        for out in group.outputs:
            assert out.reasoning_label is Tier(out.tokens[0] + 1)
            assert out.final_label is Tier(out.tokens[-1] + 1)
            assert out.reward == reward(out.final_label, out.reasoning_label, S)

    def test_seed_determinism(self):
        policy = ToyPolicy(token_count=2)
        a = toy_rollout(policy, ("p",), g=4, seed=9, truth=F)
        b = toy_rollout(policy, ("p",), g=4, seed=9, truth=F)
        assert [o.tokens for o in a.outputs] == [o.tokens for o in b.outputs]

    def test_group_too_small(self):
        with pytest.raises(GroupTooSmall):
            toy_rollout(ToyPolicy(), ("p",), g=1, seed=0, truth=F)

    def test_hint_is_recorded_and_biases_samples(self):
        policy = ToyPolicy(token_count=1)
        group = toy_rollout(policy, ("p",), g=200, seed=5, truth=L,
                            privileged_hint=L)
        assert group.hint is L
        hits = sum(o.final_label is L for o in group.outputs)
        assert hits > 120  # hinted symbol carries ~73% mass at strength 2


def finite_difference_grad(policy, group, advantages, clip, key, h=1e-5):
    base = policy.logits.get(key)
    if base is None:
        policy.logits[key] = np.zeros(4)
        base = policy.logits[key]
    fd = np.zeros(4)
    for j in range(4):
        orig = base[j]
        base[j] = orig + h
        up = grpo_loss(group, advantages, clip, policy=policy)[0]
        base[j] = orig - h
        down = grpo_loss(group, advantages, clip, policy=policy)[0]
        base[j] = orig
        fd[j] = (up - down) / (2 * h)
    return fd


class TestAnalyticGradient:
    CLIP = ClipParams(eps=0.2, eps_higher=0.1)

    def _random_setup(self, rng):
        """Group + perturbed policy with every ratio clear of the clip kinks."""
        token_count = int(rng.integers(1, 5))
        g = int(rng.integers(2, 17))
        hinted = bool(rng.integers(0, 2))
        truth = TIER_ORDER[int(rng.integers(0, 4))]
        for _ in range(60):
            logits = {("p", t): rng.normal(scale=0.5, size=4)
                      for t in range(token_count)}
            policy = ToyPolicy(logits=logits, token_count=token_count)
            group = toy_rollout(policy, ("p",), g=g, seed=int(rng.integers(1000000)),
                                truth=truth,
                                privileged_hint=truth if hinted else None)
            for key in policy.logits:
                policy.logits[key] = policy.logits[key] + rng.normal(
                    scale=0.2, size=4)
            ratios = []
            for out in group.outputs:
                for t, tok in enumerate(out.tokens):
                    lp = policy.log_probs("p", t, group.hint)[tok]
                    ratios.append(math.exp(lp - out.ref_logprobs[t]))
            if all(abs(r - self.CLIP.low) > 1e-3 and abs(r - self.CLIP.high) > 1e-3
                   for r in ratios):
                adv = rng.normal(size=g).tolist()
                return policy, group, adv
        raise AssertionError("could not find a kink-free configuration")

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(2718)
        for _ in range(100):
            policy, group, adv = self._random_setup(rng)
            _, _, grad = grpo_loss(group, adv, self.CLIP, policy=policy)
            for t in range(policy.token_count):
                key = ("p", t)
                analytic = grad.get(key, np.zeros(4))
                fd = finite_difference_grad(policy, group, adv, self.CLIP, key)
                for a, f in zip(analytic, fd):
                    assert f == pytest.approx(a, rel=1e-4, abs=1e-6)

    def test_gradient_descends(self):
        rng = np.random.default_rng(99)
        policy, group, adv = self._random_setup(rng)
        loss0, _, grad = grpo_loss(group, adv, self.CLIP, policy=policy)
        for key, vec in grad.items():
            policy.logits[key] = policy.logits[key] - 0.05 * vec
        loss1 = grpo_loss(group, adv, self.CLIP, policy=policy)[0]
        assert loss1 <= loss0 + 1e-9


class TestRunTraining:
    CONFIG = TrainConfig(steps=20, n_prompts=4, g=8, token_count=2, lr=0.5,
                         seed=7, router=RouterConfig(k=4, tau=0.25))

    def test_trace_and_summary(self, tmp_path):
        log = tmp_path / "trace.jsonl"
        summary = run_training(self.CONFIG, log_path=log)
        lines = log.read_text().splitlines()
        assert len(lines) == 20
        import json
        first = json.loads(lines[0])
        assert set(first) == {"step", "mean_reward", "fraction_privileged", "loss"}
        assert 0.0 <= first["fraction_privileged"] <= 1.0
        assert summary["steps"] == 20
        assert summary["first_mean_reward"] == first["mean_reward"]

    def test_reward_improves(self, tmp_path):
        summary = run_training(self.CONFIG, log_path=tmp_path / "t.jsonl")
        assert summary["final_mean_reward"] > summary["first_mean_reward"]

    def test_deterministic(self, tmp_path):
        a = run_training(self.CONFIG, log_path=tmp_path / "a.jsonl")
        b = run_training(self.CONFIG, log_path=tmp_path / "b.jsonl")
        assert a == b
        assert (tmp_path / "a.jsonl").read_text() == (tmp_path / "b.jsonl").read_text()
