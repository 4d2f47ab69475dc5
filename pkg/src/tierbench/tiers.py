"""Four-tier ordinal label space and venue-based ground truth.

The label space is ordinal with code 1 the best outcome:

    1 exceptional > 2 strong > 3 fair > 4 limited

Every deterministic tie-break in the package resolves in ascending code
order (exceptional first). Ground-truth tiers come from a journal-to-tier
map keyed by full venue name, with optional ISSN fallback.
"""

from __future__ import annotations

import csv
import difflib
import enum
import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

from .errors import ChanceOutOfRange, SchemaError, UnknownJournal, UnknownLabel


class Tier(enum.IntEnum):
    """Quality tier. Integer value is the ordinal code (1 = best)."""

    EXCEPTIONAL = 1
    STRONG = 2
    FAIR = 3
    LIMITED = 4

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def from_code(cls, code: int) -> "Tier":
        try:
            return cls(code)
        except ValueError:
            raise UnknownLabel(f"tier code out of range: {code!r}") from None

    @classmethod
    def from_name(cls, name: str) -> "Tier":
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise UnknownLabel(f"not a tier name: {name!r}") from None


# Canonical iteration / tie-break order: ascending code.
TIER_ORDER: tuple[Tier, ...] = tuple(Tier)

TIER_NAMES: tuple[str, ...] = tuple(t.label for t in TIER_ORDER)

# Source-specific shorthand. The human survey and article metadata both use
# a Top/Top-/Good/Fair scale whose "Fair" is the *bottom* tier, so these
# maps must never be conflated with the canonical names ("fair" = code 3).
_HUMAN_SURVEY = {"top": Tier.EXCEPTIONAL, "top-": Tier.STRONG,
                 "good": Tier.FAIR, "fair": Tier.LIMITED}
_METADATA = dict(_HUMAN_SURVEY)
_MODEL = {t.label: t for t in TIER_ORDER}

_SOURCES = {"model": _MODEL, "human_survey": _HUMAN_SURVEY, "metadata": _METADATA}

LABEL_SOURCES = tuple(_SOURCES)


def normalize_label(raw: str, source: str) -> Tier:
    """Map a raw label string from a known source onto a Tier.

    source is one of "model", "human_survey", "metadata". Matching is
    case-insensitive after stripping surrounding whitespace; anything
    outside the source's vocabulary raises UnknownLabel.
    """
    if source not in _SOURCES:
        raise UnknownLabel(f"unknown label source: {source!r}")
    key = raw.strip().lower()
    table = _SOURCES[source]
    if key not in table:
        raise UnknownLabel(f"unknown {source} label: {raw!r}")
    return table[key]


def ordinal_distance(a: Tier, b: Tier) -> int:
    """Absolute difference of tier codes (0..3)."""
    return abs(int(a) - int(b))


def headroom(accuracy: float, chance: float) -> float:
    """Fraction of the above-chance range captured: (acc - chance)/(1 - chance)."""
    if not 0.0 <= chance < 1.0:
        raise ChanceOutOfRange(f"chance must be in [0, 1), got {chance}")
    if not 0.0 <= accuracy <= 1.0:
        raise ChanceOutOfRange(f"accuracy must be in [0, 1], got {accuracy}")
    return (accuracy - chance) / (1.0 - chance)


def format_percent(fraction: float, decimals: int = 1) -> str:
    """Render a fraction as a percent string, half away from zero.

    Reports use one decimal place by default: format_percent(0.325) == '32.5'.
    """
    if not math.isfinite(fraction):
        return "nan"
    quantum = Decimal(1).scaleb(-decimals)
    # float() first: Decimal cannot parse the repr of numpy scalars
    value = (Decimal(repr(float(fraction))) * 100).quantize(
        quantum, rounding=ROUND_HALF_UP)
    return f"{value}"


@dataclass(frozen=True)
class Pitch:
    """One research-idea item with its venue-derived truth tier."""

    id: str
    field: str  # "management" or "economics"
    text_full: str
    truth: Tier
    text_short: str | None = None
    journal: str | None = None
    research_domain: str | None = None

    def __post_init__(self):
        if not self.id:
            raise SchemaError("pitch id must be non-empty")
        if self.field not in ("management", "economics"):
            raise SchemaError(f"unknown field tag: {self.field!r}")
        if not isinstance(self.truth, Tier):
            raise SchemaError(f"truth must be a Tier, got {self.truth!r}")


def _normalize_journal(name: str) -> str:
    # Case-insensitive, whitespace-collapsed, surrounding punctuation dropped.
    collapsed = " ".join(name.split()).lower()
    return collapsed.strip(" .,;:'\"()[]")


@dataclass
class JournalTierMap:
    """Full-name -> Tier lookup over a declared journal universe.

    entries holds the normalized name -> tier mapping per field; issn_index
    allows fallback lookup by ISSN/eISSN when a name misses.
    """

    entries: dict[str, dict[str, Tier]] = field(default_factory=dict)
    issn_index: dict[str, Tier] = field(default_factory=dict)
    display_names: dict[str, list[str]] = field(default_factory=dict)

    def add(self, field_name: str, journal: str, tier: Tier,
            issn: str = "", eissn: str = "") -> None:
        norm = _normalize_journal(journal)
        if not norm:
            raise SchemaError("journal name must be non-empty")
        per_field = self.entries.setdefault(field_name, {})
        if norm in per_field and per_field[norm] != tier:
            raise SchemaError(f"conflicting tiers for journal {journal!r}")
        per_field[norm] = tier
        self.display_names.setdefault(field_name, []).append(journal)
        for code in (issn, eissn):
            code = code.strip()
            if code:
                self.issn_index[code] = tier

    def fields(self) -> list[str]:
        return sorted(self.entries)

    def size(self, field_name: str) -> int:
        return len(self.entries.get(field_name, {}))


def load_journal_map(path: str | Path) -> JournalTierMap:
    """Read a field,journal_full_name,tier[,issn,eissn] CSV into a map."""
    path = Path(path)
    jmap = JournalTierMap()
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"field", "journal_full_name", "tier"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise SchemaError(f"journal CSV must have columns {sorted(required)}")
        for i, row in enumerate(reader, start=2):
            tier = normalize_label(row["tier"], "model")
            jmap.add(row["field"], row["journal_full_name"], tier,
                     issn=row.get("issn") or "", eissn=row.get("eissn") or "")
    if not jmap.entries:
        raise SchemaError(f"journal CSV has no rows: {path}")
    return jmap


def bundled_journal_map() -> JournalTierMap:
    """The journal universe shipped with the package (19 management + 38 economics)."""
    return load_journal_map(Path(__file__).parent / "assets" / "journal_tiers.csv")


def tier_for_journal(name: str, field_name: str, jmap: JournalTierMap,
                     issn: str | None = None) -> Tier:
    """Resolve a venue to its tier; ISSN is consulted only on a name miss."""
    per_field = jmap.entries.get(field_name)
    if per_field is None:
        raise UnknownJournal(name, candidates=[f"(no journals loaded for field {field_name!r})"])
    norm = _normalize_journal(name)
    if norm in per_field:
        return per_field[norm]
    if issn and issn.strip() in jmap.issn_index:
        return jmap.issn_index[issn.strip()]
    candidates = difflib.get_close_matches(norm, per_field.keys(), n=3, cutoff=0.6)
    raise UnknownJournal(name, candidates=candidates)
