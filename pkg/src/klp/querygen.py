"""Turn attribute assignments into validated, titled collection queries.

Combinations of 3-4 assigned attributes (anchored by a category attribute,
at most one attribute per category) are enumerated with support-based
pruning, checked against a redundancy/conflict rule file, and turned into
natural-language titles either by a chat model or by the deterministic
template fallback.  Queries scoring below the searchability floor are
discarded.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import kernels
from .catalog import (
    ANCHOR_CATEGORIES,
    Attribute,
    AnnotationError,
    CategorySchema,
    DEFAULT_SCHEMA,
    attribute_sort_key,
)
from .errors import InputFormatError, KlpError
from .jsonl import read_jsonl, write_jsonl_atomic
from .matcher import AttributeAssignment
from .vocab import FrequencyTable


class CombinationError(KlpError):
    """An attribute combination violates a structural invariant."""


@dataclass(frozen=True)
class AttributeCombination:
    """3-4 distinct attributes, one per category, with a category anchor."""

    attributes: tuple[Attribute, ...]
    support: int

    def __post_init__(self):
        attrs = self.attributes
        if not 3 <= len(attrs) <= 4:
            raise CombinationError(f"combination must have 3-4 attributes, got {len(attrs)}")
        if len(set(attrs)) != len(attrs):
            raise CombinationError("combination attributes must be distinct")
        categories = [a.category for a in attrs]
        if len(set(categories)) != len(categories):
            raise CombinationError("at most one attribute per category")
        if not any(c in ANCHOR_CATEGORIES for c in categories):
            raise CombinationError("combination needs at least one category attribute")
        ordered = tuple(sorted(attrs, key=attribute_sort_key))
        object.__setattr__(self, "attributes", ordered)

    @property
    def canonical_text(self) -> str:
        return ",".join(a.text for a in self.attributes)


@dataclass(frozen=True)
class GeneratedQuery:
    combination: AttributeCombination
    title: str
    searchability: int
    valid: bool
    invalid_reason: str | None = None
    generator: str = "fallback"

    def __post_init__(self):
        if not 1 <= self.searchability <= 5:
            raise ValueError("searchability must be in 1..5")
        if not self.valid and not self.invalid_reason:
            raise ValueError("invalid queries must carry a reason")

    def to_record(self) -> dict:
        record = {
            "title": self.title,
            "attributes": [
                {"category": a.category, "value": a.value}
                for a in self.combination.attributes
            ],
            "searchability": self.searchability,
            "valid": self.valid,
            "generator": self.generator,
            "support": self.combination.support,
        }
        if self.invalid_reason is not None:
            record["invalid_reason"] = self.invalid_reason
        return record


# ---------------------------------------------------------------------------
# Enumeration
# ---------------------------------------------------------------------------


def enumerate_combinations(
    assignments: Sequence[AttributeAssignment],
    min_support: int,
    size_range: tuple[int, int] = (3, 4),
) -> list[AttributeCombination]:
    """All anchored 3-4 attribute combinations with enough joint support.

    Support is the number of products whose assignment contains every
    attribute of the combination.  Enumeration grows itemsets level by
    level, keeping postings (sorted product indices) per itemset, so any
    candidate whose subset already fell below ``min_support`` is never
    counted — a superset's support can only shrink.
    """
    if not assignments:
        raise ValueError("assignments must be nonempty")
    if min_support < 1:
        raise ValueError("min_support must be at least 1")
    lo, hi = size_range
    if not (lo == 3 and hi == 4):
        raise ValueError("combination sizes are fixed at 3-4")

    postings: dict[Attribute, list[int]] = defaultdict(list)
    for row, assignment in enumerate(assignments):
        for attr in {s.attribute for s in assignment.matched}:
            postings[attr].append(row)
    level1 = {
        (attr,): np.asarray(rows, dtype=np.int64)
        for attr, rows in postings.items()
        if len(rows) >= min_support
    }

    results: list[AttributeCombination] = []
    level = level1
    for size in range(2, hi + 1):
        items = sorted(level.keys(), key=lambda t: tuple(a.text for a in t))
        next_level: dict[tuple[Attribute, ...], np.ndarray] = {}
        for i in range(len(items)):
            for j in range(i + 1, len(items)):
                left, right = items[i], items[j]
                if left[:-1] != right[:-1]:
                    # items sorted: once prefixes diverge no later j matches
                    break
                candidate = left + (right[-1],)
                if left[-1].category == right[-1].category:
                    continue
                if size > 2 and not _all_subsets_present(candidate, level):
                    continue
                posting = kernels.intersect_sorted([level[left], level[right]])
                if posting.size >= min_support:
                    next_level[candidate] = posting
        level = next_level
        if size >= lo:
            for candidate, posting in level.items():
                if any(a.category in ANCHOR_CATEGORIES for a in candidate):
                    results.append(
                        AttributeCombination(candidate, support=int(posting.size))
                    )
        if not level:
            break

    results.sort(key=lambda c: (-c.support, c.canonical_text))
    return results


def _all_subsets_present(candidate: tuple[Attribute, ...], level: Mapping) -> bool:
    for drop in range(len(candidate) - 2):  # last two positions come from the join
        subset = candidate[:drop] + candidate[drop + 1 :]
        if subset not in level:
            return False
    return True


# ---------------------------------------------------------------------------
# Rule validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ValidationRules:
    """Redundancy (implies) and incompatibility (conflicts) pairs.

    An ``implies`` rule (left → right) marks combinations holding both sides
    as redundant, e.g. a ring is inherently round so "rings" plus "round"
    reads badly.  A ``conflicts`` rule rejects combinations holding both
    sides in either order.
    """

    implied: tuple[tuple[Attribute, Attribute], ...] = ()
    conflicts: tuple[tuple[Attribute, Attribute], ...] = ()


def load_rules(path: str | Path, schema: CategorySchema = DEFAULT_SCHEMA) -> ValidationRules:
    implied = []
    conflicts = []
    for lineno, record in read_jsonl(path):
        try:
            kind = record["type"]
            left = Attribute.parse(record["left"]["category"], record["left"]["value"], schema)
            right = Attribute.parse(record["right"]["category"], record["right"]["value"], schema)
        except (KeyError, TypeError, AnnotationError) as exc:
            raise InputFormatError(f"{path}: line {lineno}: bad rule ({exc})") from None
        if kind == "implies":
            implied.append((left, right))
        elif kind == "conflicts":
            conflicts.append((left, right))
        else:
            raise InputFormatError(f"{path}: line {lineno}: unknown rule type {kind!r}")
    return ValidationRules(tuple(implied), tuple(conflicts))


def validate_combination(
    combo: AttributeCombination, rules: ValidationRules
) -> tuple[bool, str | None]:
    """Check a combination against the rule file; reason names the rule."""
    present = set(combo.attributes)
    for left, right in rules.implied:
        if left in present and right in present:
            return False, f"redundant: {left.text} already implies {right.text}"
    for left, right in rules.conflicts:
        if left in present and right in present:
            return False, f"conflict: {left.text} is incompatible with {right.text}"
    return True, None


# ---------------------------------------------------------------------------
# Fallback title synthesis and searchability scoring
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TitleTemplates:
    """Slot order for the deterministic title builder.

    Modifiers render in the listed order, the most specific category level
    present becomes the head noun (coarser levels are implied and omitted),
    and the first tail category present renders as a trailing "for" phrase.
    """

    modifier_order: tuple[str, ...] = (
        "brand",
        "season",
        "color",
        "material",
        "fit",
        "stretch",
        "shape",
        "style",
        "details",
        "gender",
        "age_group",
        "price_level",
    )
    head_order: tuple[str, ...] = ("category_l3", "category_l2", "category_l1")
    tail_order: tuple[str, ...] = ("occasion", "festival")
    connector: str = "for"


DEFAULT_TITLE_TEMPLATES = TitleTemplates()


def _title_case(value: str) -> str:
    # str.title() would capitalize after apostrophes ("Year'S"); only the
    # first character of each word should change.
    return " ".join(w[:1].upper() + w[1:] for w in value.split())


def synthesize_title_fallback(
    combo: AttributeCombination,
    templates: TitleTemplates = DEFAULT_TITLE_TEMPLATES,
) -> str:
    by_category = {a.category: a.value for a in combo.attributes}
    head = next(
        (by_category[c] for c in templates.head_order if c in by_category), None
    )
    if head is None:
        raise CombinationError("no category attribute to anchor the title")
    used_tail = next((c for c in templates.tail_order if c in by_category), None)
    parts = [
        _title_case(by_category[c]) for c in templates.modifier_order if c in by_category
    ]
    parts.append(_title_case(head))
    title = " ".join(parts)
    if used_tail is not None:
        title = f"{title} {templates.connector} {_title_case(by_category[used_tail])}"
    return title


@dataclass(frozen=True)
class SupportQuantiles:
    """Order statistics of the current run's combination supports."""

    p50: float
    p80: float
    median_frequency: float


def compute_support_quantiles(
    supports: Sequence[int], freq_table: FrequencyTable
) -> SupportQuantiles:
    if not supports:
        raise ValueError("no combination supports to summarize")
    arr = np.asarray(sorted(supports), dtype=np.float64)
    freqs = np.asarray(sorted(freq_table.values()), dtype=np.float64)
    median_freq = float(np.quantile(freqs, 0.5, method="lower")) if freqs.size else 0.0
    return SupportQuantiles(
        p50=float(np.quantile(arr, 0.5, method="lower")),
        p80=float(np.quantile(arr, 0.8, method="lower")),
        median_frequency=median_freq,
    )


def score_searchability_fallback(
    combo: AttributeCombination,
    freq_table: FrequencyTable,
    quantiles: SupportQuantiles,
) -> int:
    """Deterministic 1-5 heuristic: one point per satisfied criterion.

    Criteria: support at/above the median support, support at/above the 80th
    percentile, every attribute at/above the median vocabulary frequency,
    and the tighter 3-attribute form.  This is an explicit stand-in for a
    judgment call — the contract is the range, determinism, and monotonicity
    in support, nothing more.
    """
    score = 1
    if combo.support >= quantiles.p50:
        score += 1
    if combo.support >= quantiles.p80:
        score += 1
    if all(freq_table.count(a) >= quantiles.median_frequency for a in combo.attributes):
        score += 1
    if len(combo.attributes) == 3:
        score += 1
    return max(1, min(5, score))


# ---------------------------------------------------------------------------
# LLM generation and filtering
# ---------------------------------------------------------------------------


def generate_with_llm(combo: AttributeCombination, client, template) -> GeneratedQuery:
    """One round-trip asking the model to validate, title, and score a combo.

    The reply must be a structured object with ``valid``, ``title``/``score``
    (when valid) or ``reason`` (when not).  A malformed reply is retried once
    and then surfaced as an error with the raw payload attached.
    """
    from . import clients

    attrs_text = ", ".join(f"{a.category}: {a.value}" for a in combo.attributes)
    prompt = template.render(attributes=attrs_text)
    last_error: Exception | None = None
    for _ in range(2):
        raw = client.chat_complete(prompt)
        try:
            fields = clients.parse_structured(raw, clients.QUERY_REPLY_SCHEMA)
        except clients.ResponseParseError as exc:
            last_error = exc
            continue
        if fields["valid"]:
            return GeneratedQuery(
                combination=combo,
                title=fields["title"],
                searchability=fields["score"],
                valid=True,
                generator="llm",
            )
        return GeneratedQuery(
            combination=combo,
            title=fields.get("title", ""),
            searchability=fields.get("score", 1),
            valid=False,
            invalid_reason=fields["reason"],
            generator="llm",
        )
    raise last_error  # type: ignore[misc]


def filter_queries(queries: Sequence[GeneratedQuery], min_score: int = 4) -> list[GeneratedQuery]:
    """Keep valid queries scoring at least ``min_score``; dedup exact titles.

    Of two surviving queries with the same title the higher-support
    combination wins (ties fall to the lexicographically smaller canonical
    text).  Output is ordered by (support desc, canonical text asc).
    """
    if not 1 <= min_score <= 5:
        raise ValueError("min_score must be in 1..5")
    best: dict[str, GeneratedQuery] = {}
    for query in queries:
        if not query.valid or query.searchability < min_score:
            continue
        incumbent = best.get(query.title)
        if incumbent is None or _dedup_key(query) < _dedup_key(incumbent):
            best[query.title] = query
    return sorted(best.values(), key=_dedup_key)


def _dedup_key(query: GeneratedQuery) -> tuple[int, str]:
    return (-query.combination.support, query.combination.canonical_text)


def save_queries(queries: Sequence[GeneratedQuery], path: str | Path) -> int:
    return write_jsonl_atomic(path, (q.to_record() for q in queries))


def load_queries(
    path: str | Path, schema: CategorySchema = DEFAULT_SCHEMA
) -> list[GeneratedQuery]:
    out = []
    for lineno, record in read_jsonl(path):
        try:
            attrs = tuple(
                Attribute.parse(a["category"], a["value"], schema)
                for a in record["attributes"]
            )
            combo = AttributeCombination(attrs, support=int(record["support"]))
            out.append(
                GeneratedQuery(
                    combination=combo,
                    title=str(record["title"]),
                    searchability=int(record["searchability"]),
                    valid=bool(record["valid"]),
                    invalid_reason=record.get("invalid_reason"),
                    generator=str(record.get("generator", "fallback")),
                )
            )
        except (KeyError, CombinationError, AnnotationError) as exc:
            raise InputFormatError(f"{path}: line {lineno}: {exc}") from None
    return out
