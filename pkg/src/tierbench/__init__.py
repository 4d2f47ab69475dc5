"""Four-tier research-pitch evaluation toolkit.

Benchmarks research-idea pitches against a four-tier publication-potential
scale, scores model and human evaluators against journal-derived ground
truth, and ships the statistics used to compare them: accuracy and macro-F1
with confidence intervals, calibration (ECE, Brier, selective prediction),
inter-rater agreement, paired tests, pairwise discrimination tasks, and a
toy GRPO training simulation.
"""

__version__ = "0.1.0"

from .tiers import (Pitch, Tier, TIER_NAMES, TIER_ORDER, format_percent,
                    headroom, normalize_label, ordinal_distance)

__all__ = [
    "Pitch",
    "Tier",
    "TIER_NAMES",
    "TIER_ORDER",
    "__version__",
    "format_percent",
    "headroom",
    "normalize_label",
    "ordinal_distance",
]
