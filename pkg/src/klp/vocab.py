"""Attribute vocabulary curation: frequency filter, semantic dedup, review list.

Raw annotations produce a noisy attribute pool.  Curation keeps attributes
seen on enough products, collapses near-duplicate variants onto their
higher-frequency representative via greedy cosine dedup, and finally removes
anything on a human review list.
"""

from __future__ import annotations

from collections import defaultdict
from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels
from .catalog import (
    Attribute,
    AnnotationError,
    CategorySchema,
    DEFAULT_SCHEMA,
    ProductAnnotation,
    attribute_sort_key,
)
from .errors import DegenerateInputError, InputFormatError
from .jsonl import read_jsonl, write_jsonl_atomic


class FrequencyTable(Mapping):
    """Product-level presence counts per attribute.

    An attribute listed twice in one product's annotation still counts once:
    frequency means "how many products carry this attribute", which is the
    notion the matching weights and searchability heuristics rely on.
    """

    def __init__(self, counts: Mapping[Attribute, int] | None = None):
        self._counts: dict[Attribute, int] = {}
        for attr, count in (counts or {}).items():
            if count < 0:
                raise ValueError(f"negative count for {attr.text}")
            self._counts[attr] = int(count)

    def __getitem__(self, attr: Attribute) -> int:
        return self._counts[attr]

    def __iter__(self):
        return iter(self._counts)

    def __len__(self) -> int:
        return len(self._counts)

    def count(self, attr: Attribute) -> int:
        return self._counts.get(attr, 0)

    def restrict(self, attrs: Iterable[Attribute]) -> "FrequencyTable":
        keep = set(attrs)
        return FrequencyTable({a: c for a, c in self._counts.items() if a in keep})


def count_frequencies(annotations: Sequence[ProductAnnotation]) -> FrequencyTable:
    """Count, per attribute, the number of distinct products carrying it."""
    per_product: dict[str, set[Attribute]] = defaultdict(set)
    for ann in annotations:
        per_product[ann.product_id].update(ann.attributes)
    counts: dict[Attribute, int] = defaultdict(int)
    for attrs in per_product.values():
        for attr in attrs:
            counts[attr] += 1
    return FrequencyTable(counts)


def frequency_filter(table: FrequencyTable, min_frequency: int) -> set[Attribute]:
    if min_frequency < 1:
        raise ValueError("min_frequency must be at least 1")
    return {attr for attr, count in table.items() if count >= min_frequency}


@dataclass(frozen=True)
class VocabConfig:
    min_frequency: int = 2
    dedup_threshold: float = 0.9
    review_list_path: str | None = None
    dedup_cross_category: bool = False

    def __post_init__(self):
        if not 0.0 < self.dedup_threshold <= 1.0:
            raise ValueError("dedup_threshold must be in (0, 1]")
        if self.min_frequency < 1:
            raise ValueError("min_frequency must be at least 1")


@dataclass(frozen=True)
class AttributeVocabulary:
    """The curated attribute set plus the variant → representative map."""

    retained: tuple[Attribute, ...]
    canonical_map: dict[Attribute, Attribute]
    frequencies: FrequencyTable

    def __post_init__(self):
        kept = frozenset(self.retained)
        object.__setattr__(self, "_retained_set", kept)
        for dropped, target in self.canonical_map.items():
            if target not in kept:
                raise ValueError(
                    f"canonical target {target.text} of {dropped.text} is not retained"
                )

    def canonicalize(self, attr: Attribute) -> Attribute | None:
        """Map an attribute onto its retained representative, if any."""
        if attr in self._retained_set:
            return attr
        return self.canonical_map.get(attr)

    def __len__(self) -> int:
        return len(self.retained)


def _dedup_order(attrs: Iterable[Attribute], table: FrequencyTable) -> list[Attribute]:
    return sorted(attrs, key=lambda a: (-table.count(a), attribute_sort_key(a)))


def semantic_dedup(
    attrs: set[Attribute],
    table: FrequencyTable,
    embedder: Callable[[str], np.ndarray],
    threshold: float,
    cross_category: bool = False,
) -> AttributeVocabulary:
    """Greedy near-duplicate collapse, highest frequency first.

    Attributes are visited in (frequency desc, text asc) order; one is kept
    iff its cosine similarity to every already-kept attribute stays below
    ``threshold``, otherwise it maps to the most-similar kept attribute.  By
    default the sweep runs independently within each category; pass
    ``cross_category=True`` to compare across the whole pool.
    """
    missing = [a for a in attrs if a not in table]
    if missing:
        raise ValueError(f"attribute missing from frequency table: {missing[0].text}")

    if cross_category:
        groups = [sorted(attrs, key=attribute_sort_key)]
    else:
        by_cat: dict[str, list[Attribute]] = defaultdict(list)
        for attr in attrs:
            by_cat[attr.category].append(attr)
        groups = [by_cat[c] for c in sorted(by_cat)]

    retained: list[Attribute] = []
    canonical: dict[Attribute, Attribute] = {}
    for group in groups:
        ordered = _dedup_order(group, table)
        vectors = np.stack([_unit_embedding(embedder, a) for a in ordered])
        keep, canon = kernels.greedy_keep(vectors, threshold)
        for idx, attr in enumerate(ordered):
            if keep[idx]:
                retained.append(attr)
            else:
                canonical[attr] = ordered[canon[idx]]

    retained_sorted = tuple(_dedup_order(retained, table))
    return AttributeVocabulary(
        retained=retained_sorted,
        canonical_map=canonical,
        frequencies=table.restrict(retained_sorted),
    )


def _unit_embedding(embedder: Callable[[str], np.ndarray], attr: Attribute) -> np.ndarray:
    vec = np.asarray(embedder(attr.text), dtype=np.float64)
    norm = float(np.linalg.norm(vec))
    if norm == 0.0 or not np.all(np.isfinite(vec)):
        raise DegenerateInputError(f"embedder returned an unusable vector for {attr.text}")
    return vec / norm


def apply_review_list(
    vocab: AttributeVocabulary, review_list: set[Attribute]
) -> AttributeVocabulary:
    """Drop reviewed-out attributes; stale canonical entries are deleted."""
    retained = tuple(a for a in vocab.retained if a not in review_list)
    kept = set(retained)
    canonical = {
        dropped: target
        for dropped, target in vocab.canonical_map.items()
        if target in kept
    }
    return AttributeVocabulary(
        retained=retained,
        canonical_map=canonical,
        frequencies=vocab.frequencies.restrict(retained),
    )


def load_review_list(
    path: str | Path, schema: CategorySchema = DEFAULT_SCHEMA
) -> set[Attribute]:
    """One ``category:value`` per line; ``#`` starts a comment."""
    out: set[Attribute] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            try:
                out.add(Attribute.parse_text(text, schema))
            except AnnotationError as exc:
                raise InputFormatError(f"{path}: line {lineno}: {exc}") from None
    return out


def save_vocabulary(vocab: AttributeVocabulary, path: str | Path) -> int:
    dropped_by_target: dict[Attribute, list[str]] = defaultdict(list)
    for dropped, target in vocab.canonical_map.items():
        dropped_by_target[target].append(dropped.text)

    def rows():
        for attr in vocab.retained:
            yield {
                "category": attr.category,
                "value": attr.value,
                "frequency": vocab.frequencies.count(attr),
                "canonical_of": sorted(dropped_by_target.get(attr, [])),
            }

    return write_jsonl_atomic(path, rows())


def load_vocabulary(
    path: str | Path, schema: CategorySchema = DEFAULT_SCHEMA
) -> AttributeVocabulary:
    retained: list[Attribute] = []
    counts: dict[Attribute, int] = {}
    canonical: dict[Attribute, Attribute] = {}
    for lineno, record in read_jsonl(path):
        try:
            attr = Attribute.parse(record["category"], record["value"], schema)
        except (KeyError, AnnotationError) as exc:
            raise InputFormatError(f"{path}: line {lineno}: {exc}") from None
        retained.append(attr)
        counts[attr] = int(record.get("frequency", 0))
        for text in record.get("canonical_of", []):
            canonical[Attribute.parse_text(text, schema)] = attr
    return AttributeVocabulary(
        retained=tuple(retained),
        canonical_map=canonical,
        frequencies=FrequencyTable(counts),
    )
