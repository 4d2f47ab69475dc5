"""Desk-scale simulation of group-relative policy optimization.

Reproduces the training objective's arithmetic at toy size: consistency-
gated ordinal rewards, group-normalized advantages, and the token-level
clipped surrogate with an asymmetric upper clip. The toy policy emits
short sequences over a four-symbol vocabulary (the tier labels); the first
token stands in for the label stated in the reasoning, the last token for
the final answer. Rollouts snapshot reference log-probs at creation time,
so the surrogate's ratios move only with the current policy.

There is no KL penalty term anywhere in the objective.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (GroupTooSmall, LengthMismatch, NonFiniteRatio,
                     SchemaError, WrongDiagnosticCount)
from .tiers import TIER_ORDER, Tier, ordinal_distance


@dataclass(frozen=True)
class RewardSpec:
    exact: float = 1.0
    adjacent: float = 0.3
    far: float = 0.0

    def __post_init__(self):
        if not self.exact >= self.adjacent >= self.far:
            raise SchemaError("reward spec must satisfy exact >= adjacent >= far")


@dataclass(frozen=True)
class ClipParams:
    """Asymmetric ratio clip: [1 - eps, 1 + eps + eps_higher]."""

    eps: float = 0.2
    eps_higher: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.eps < 1.0:
            raise SchemaError(f"eps must be in (0, 1), got {self.eps}")
        if self.eps_higher < 0.0:
            raise SchemaError(f"eps_higher must be >= 0, got {self.eps_higher}")

    @property
    def low(self) -> float:
        return 1.0 - self.eps

    @property
    def high(self) -> float:
        return 1.0 + self.eps + self.eps_higher


@dataclass(frozen=True)
class RouterConfig:
    """Routing by diagnostic pass rate: privileged iff correct/k < tau."""

    k: int = 8
    tau: float = 0.25

    def __post_init__(self):
        if self.k < 1:
            raise SchemaError(f"k must be >= 1, got {self.k}")
        if not 0.0 <= self.tau <= 1.0:
            raise SchemaError(f"tau must be in [0, 1], got {self.tau}")


def reward(label_pred: Tier | None, reasoning_pred: Tier | None,
           truth: Tier, spec: RewardSpec = RewardSpec()) -> float:
    """Consistency-gated ordinal reward.

    Zero unless the final label exists and equals the reasoning label;
    then exact / adjacent / far by ordinal distance to truth (0 / 1 / >= 2).
    """
    if label_pred is None or label_pred != reasoning_pred:
        return 0.0
    d = ordinal_distance(label_pred, truth)
    if d == 0:
        return spec.exact
    if d == 1:
        return spec.adjacent
    return spec.far


def normalize_advantages(rewards: list[float],
                         sigma_floor: float = 1e-8) -> list[float]:
    """(r - group mean) / (group population std + floor)."""
    if len(rewards) < 2:
        raise GroupTooSmall(f"need a group of >= 2, got {len(rewards)}")
    arr = np.asarray(rewards, dtype=float)
    sigma = float(arr.std())  # population convention (ddof 0)
    return [float(v) for v in (arr - arr.mean()) / (sigma + sigma_floor)]


def route_privileged(diagnostic_correct: list[list[bool]],
                     config: RouterConfig = RouterConfig()) -> list[bool]:
    """Per-prompt routing decisions from k-sample diagnostics.

    The threshold is strict: a pass rate exactly at tau stays standard.
    """
    decisions = []
    for i, flags in enumerate(diagnostic_correct):
        if len(flags) != config.k:
            raise WrongDiagnosticCount(
                f"prompt {i}: expected {config.k} diagnostic flags, got {len(flags)}")
        decisions.append(sum(flags) / config.k < config.tau)
    return decisions


# ---------------------------------------------------------------------------
# Toy policy and rollouts


@dataclass
class ToyPolicy:
    """Tabular categorical policy over the four tier symbols.

    logits maps (feature bucket, position) to a length-4 vector; missing
    entries act as zeros (uniform). A privileged hint adds hint_strength to
    the hinted symbol's logit at every position, the linear-feature analog
    of prepending a truth-grounded hint.
    """

    logits: dict[tuple[str, int], np.ndarray] = field(default_factory=dict)
    token_count: int = 1
    hint_strength: float = 2.0

    def __post_init__(self):
        if self.token_count < 1:
            raise SchemaError("token_count must be >= 1")
        for key, vec in list(self.logits.items()):
            arr = np.asarray(vec, dtype=float)
            if arr.shape != (4,) or not np.all(np.isfinite(arr)):
                raise SchemaError(f"logits[{key!r}] must be a finite four-vector")
            self.logits[key] = arr

    def effective_logits(self, bucket: str, position: int,
                         hint: Tier | None) -> np.ndarray:
        base = self.logits.get((bucket, position))
        vec = np.zeros(4) if base is None else base.astype(float, copy=True)
        if hint is not None:
            vec[int(hint) - 1] += self.hint_strength
        return vec

    def log_probs(self, bucket: str, position: int,
                  hint: Tier | None) -> np.ndarray:
        vec = self.effective_logits(bucket, position, hint)
        shifted = vec - vec.max()
        return shifted - math.log(np.exp(shifted).sum())


@dataclass
class RolloutOutput:
    tokens: tuple[int, ...]  # symbol indices 0..3 (tier code - 1)
    policy_logprobs: tuple[float, ...]
    ref_logprobs: tuple[float, ...]
    final_label: Tier | None
    reasoning_label: Tier | None
    reward: float

    @property
    def token_count(self) -> int:
        return len(self.tokens)


@dataclass
class GroupRollout:
    prompt_id: str
    bucket: str
    hint: Tier | None
    truth: Tier
    outputs: list[RolloutOutput]

    def rewards(self) -> list[float]:
        return [o.reward for o in self.outputs]


def toy_rollout(policy: ToyPolicy, prompt_features: tuple[str, ...], g: int,
                seed: int, truth: Tier, privileged_hint: Tier | None = None,
                reward_spec: RewardSpec = RewardSpec()) -> GroupRollout:
    """Sample a group of G sequences and score them.

    Reference log-probs are snapshotted from the sampling-time policy, so a
    freshly built group has every ratio exactly 1.
    """
    if g < 2:
        raise GroupTooSmall(f"need G >= 2, got {g}")
    bucket = "|".join(prompt_features)
    rng = np.random.default_rng(seed)
    outputs = []
    for _ in range(g):
        tokens = []
        lps = []
        for t in range(policy.token_count):
            logp = policy.log_probs(bucket, t, privileged_hint)
            tok = int(rng.choice(4, p=np.exp(logp)))
            tokens.append(tok)
            lps.append(float(logp[tok]))
        reasoning = Tier(tokens[0] + 1)
        final = Tier(tokens[-1] + 1)
        outputs.append(RolloutOutput(
            tokens=tuple(tokens), policy_logprobs=tuple(lps),
            ref_logprobs=tuple(lps), final_label=final,
            reasoning_label=reasoning,
            reward=reward(final, reasoning, truth, reward_spec)))
    return GroupRollout(prompt_id=bucket, bucket=bucket, hint=privileged_hint,
                        truth=truth, outputs=outputs)


# ---------------------------------------------------------------------------
# Clipped surrogate


def grpo_loss(group: GroupRollout, advantages: list[float],
              clip: ClipParams = ClipParams(), policy: ToyPolicy | None = None):
    """Token-level clipped surrogate loss for one group.

    loss = -(sum_i sum_t min(r A_i, clip(r) A_i)) / (sum_i |o_i|), with
    r the per-token prob ratio against the reference snapshot.

    With a ToyPolicy supplied, policy log-probs are recomputed from its
    current logits and the return gains an analytic gradient with respect
    to those logits, as {(bucket, position): four-vector}; accumulation
    runs in fixed (output, token) order so results are bit-reproducible.
    Advantages are treated as constants of the policy.
    """
    if len(advantages) != len(group.outputs):
        raise LengthMismatch(f"{len(advantages)} advantages for "
                             f"{len(group.outputs)} outputs")
    if len(group.outputs) < 2:
        raise GroupTooSmall("a group needs >= 2 outputs")
    total_tokens = sum(o.token_count for o in group.outputs)
    lo, hi = clip.low, clip.high
    term_sum = 0.0
    per_token_terms: list[list[float]] = []
    grad: dict[tuple[str, int], np.ndarray] = {}
    for out, adv in zip(group.outputs, advantages):
        terms = []
        for t, tok in enumerate(out.tokens):
            if policy is not None:
                logp_vec = policy.log_probs(group.bucket, t, group.hint)
                pol_lp = float(logp_vec[tok])
            else:
                pol_lp = out.policy_logprobs[t]
            try:
                ratio = math.exp(pol_lp - out.ref_logprobs[t])
            except OverflowError:
                ratio = math.inf
            if not math.isfinite(ratio):
                raise NonFiniteRatio(
                    f"ratio overflow at token {t}: exp({pol_lp - out.ref_logprobs[t]})")
            unclipped = ratio * adv
            clipped = min(max(ratio, lo), hi) * adv
            term = min(unclipped, clipped)
            terms.append(term)
            term_sum += term
            if policy is not None:
                factor = adv * ratio if unclipped <= clipped else 0.0
                if factor != 0.0:
                    key = (group.bucket, t)
                    if key not in grad:
                        grad[key] = np.zeros(4)
                    jac = -np.exp(logp_vec)  # -softmax
                    jac[tok] += 1.0
                    grad[key] += (-factor / total_tokens) * jac
        per_token_terms.append(terms)
    loss = -term_sum / total_tokens
    if policy is not None:
        return loss, per_token_terms, grad
    return loss, per_token_terms


# ---------------------------------------------------------------------------
# Toy training loop


@dataclass
class TrainConfig:
    steps: int = 60
    n_prompts: int = 8
    g: int = 8
    token_count: int = 2
    lr: float = 0.5
    seed: int = 0
    router: RouterConfig = field(default_factory=RouterConfig)
    clip: ClipParams = field(default_factory=ClipParams)
    rewards: RewardSpec = field(default_factory=RewardSpec)
    hint_strength: float = 2.0


def run_training(config: TrainConfig, log_path: str | Path | None = None) -> dict:
    """Train a toy policy with routed privileged hints; returns a summary.

    Each prompt bucket's truth tier cycles through the four tiers. Per step
    and prompt: k diagnostic samples decide routing, a fresh group is
    rolled out (hinted when privileged), and one gradient step follows.
    Appends {step, mean_reward, fraction_privileged, loss} lines to the log.
    """
    policy = ToyPolicy(token_count=config.token_count,
                       hint_strength=config.hint_strength)
    truths = {f"p{i}": TIER_ORDER[i % 4] for i in range(config.n_prompts)}
    lines = []
    summary: dict = {}
    step_seed = np.random.default_rng(config.seed)
    for step in range(config.steps):
        step_rewards = []
        privileged_count = 0
        losses = []
        for i, (pid, truth) in enumerate(sorted(truths.items())):
            diag_seed = int(step_seed.integers(0, 2 ** 31))
            diag = toy_rollout(policy, (pid,), max(config.router.k, 2),
                               diag_seed, truth, reward_spec=config.rewards)
            flags = [o.final_label == truth for o in diag.outputs][:config.router.k]
            privileged = route_privileged([flags], config.router)[0]
            privileged_count += privileged
            group = toy_rollout(policy, (pid,), config.g,
                                int(step_seed.integers(0, 2 ** 31)), truth,
                                privileged_hint=truth if privileged else None,
                                reward_spec=config.rewards)
            rewards_g = group.rewards()
            step_rewards.extend(rewards_g)
            if len(set(rewards_g)) == 1:
                continue  # zero advantages, nothing to learn from this group
            adv = normalize_advantages(rewards_g)
            loss, _, grad = grpo_loss(group, adv, config.clip, policy=policy)
            losses.append(loss)
            for key, g_vec in grad.items():
                base = policy.logits.get(key)
                if base is None:
                    base = np.zeros(4)
                policy.logits[key] = base - config.lr * g_vec
        record = {"step": step,
                  "mean_reward": float(np.mean(step_rewards)),
                  "fraction_privileged": privileged_count / config.n_prompts,
                  "loss": float(np.mean(losses)) if losses else 0.0}
        lines.append(record)
    if log_path is not None:
        with Path(log_path).open("a", encoding="utf-8") as fh:
            for record in lines:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
    summary = {"steps": config.steps,
               "first_mean_reward": lines[0]["mean_reward"] if lines else 0.0,
               "final_mean_reward": lines[-1]["mean_reward"] if lines else 0.0,
               "final_fraction_privileged": (lines[-1]["fraction_privileged"]
                                             if lines else 0.0)}
    return summary
