import numpy as np
import pytest

from tierbench.classify import LabelDistribution
from tierbench.ingest import BenchmarkSet, PredictionRecord
from tierbench.tiers import TIER_ORDER, Pitch, Tier


def make_bench(per_tier: int = 30, bench_id: str = "bench",
               field: str = "management") -> BenchmarkSet:
    pitches = []
    k = 0
    for tier in TIER_ORDER:
        for _ in range(per_tier):
            pitches.append(Pitch(id=f"p{k:03d}", field=field,
                                 text_full=f"pitch text {k}", truth=tier))
            k += 1
    return BenchmarkSet(id=bench_id, pitches=pitches)


def onehot_dist(tier: Tier, soft: float = 0.0) -> LabelDistribution:
    """Distribution peaked on tier; soft > 0 spreads mass to the others."""
    probs = [soft / 3.0] * 4
    probs[int(tier) - 1] = 1.0 - soft
    return LabelDistribution(tuple(probs))


def logprob_record(evaluator: str, pitch_id: str, tier: Tier,
                   soft: float = 0.15) -> PredictionRecord:
    return PredictionRecord(evaluator_id=evaluator, pitch_id=pitch_id,
                            kind="logprob", distribution=onehot_dist(tier, soft))


def prediction_file(path, bench: BenchmarkSet, labels: dict[str, Tier],
                    evaluator: str = "model-a", soft: float = 0.15):
    """Write a logprob-kind predictions JSONL mapping pitch -> label."""
    from tierbench import ingest
    records = [logprob_record(evaluator, pid, labels[pid], soft=soft)
               for pid in sorted(labels)]
    ingest.save_predictions(records, path, meta={"evaluator_id": evaluator})
    return path


@pytest.fixture
def bench120() -> BenchmarkSet:
    return make_bench(30)


@pytest.fixture
def bench8() -> BenchmarkSet:
    return make_bench(2, bench_id="tiny")


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240817)
