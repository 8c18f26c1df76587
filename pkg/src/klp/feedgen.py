"""Build the product feed behind every surviving query.

A product's relevance to a query is the sum of its assignment scores over
the query/product attribute overlap.  The indexed path intersects sorted
posting lists to find candidates and accumulates scores with the kernels
module; ``build_feeds_naive`` is the straight nested-loop reference the
indexed path must reproduce byte for byte.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import kernels
from .catalog import (
    Attribute,
    AnnotationError,
    CategorySchema,
    DEFAULT_SCHEMA,
    attribute_sort_key,
)
from .embed import EmbeddingStore, ProjectionHead, attribute_key
from .errors import DegenerateInputError, InputFormatError, KlpError
from .jsonl import read_jsonl, write_jsonl_atomic
from .matcher import AttributeAssignment
from .querygen import AttributeCombination, GeneratedQuery


@dataclass(frozen=True)
class CollectionQuery:
    title: str
    attributes: tuple[Attribute, ...]
    searchability: int

    def __post_init__(self):
        # reuse the combination invariants (3-4 attrs, anchor, one per category)
        AttributeCombination(self.attributes, support=1)
        object.__setattr__(
            self, "attributes", tuple(sorted(self.attributes, key=attribute_sort_key))
        )

    @classmethod
    def from_query(cls, query: GeneratedQuery) -> "CollectionQuery":
        return cls(query.title, query.combination.attributes, query.searchability)


@dataclass(frozen=True)
class FeedEntry:
    product_id: str
    relevance: float
    contributing: tuple[tuple[Attribute, float], ...]


@dataclass(frozen=True)
class Collection:
    query: CollectionQuery
    entries: tuple[FeedEntry, ...]

    def to_record(self) -> dict:
        return {
            "title": self.query.title,
            "attributes": [
                {"category": a.category, "value": a.value} for a in self.query.attributes
            ],
            "products": [
                {
                    "product_id": e.product_id,
                    "relevance": e.relevance,
                    "contributing": [
                        {"category": a.category, "value": a.value, "score": s}
                        for a, s in e.contributing
                    ],
                }
                for e in self.entries
            ],
        }


@dataclass(frozen=True)
class FeedConfig:
    min_products: int = 20
    min_relevance: float = 0.0
    require_all_attributes: bool = True

    def __post_init__(self):
        if self.min_products < 1:
            raise ValueError("min_products must be at least 1")


class AttributeNotAssignedError(KlpError):
    """Asked for the confidence of an attribute the product doesn't hold."""


def attribute_confidence(product: AttributeAssignment, attribute: Attribute) -> float:
    """The matched attribute's adjusted score (similarity times popularity weight)."""
    score = product.score_of(attribute)
    if score is None:
        raise AttributeNotAssignedError(
            f"product {product.product_id!r} has no attribute {attribute.text}"
        )
    return score


def relevance(query: CollectionQuery, product: AttributeAssignment) -> float:
    """Sum of confidences over the query/product overlap; 0 when disjoint.

    Scores are added in attribute text order so every code path sums in the
    same sequence.
    """
    scores = {s.attribute: s.adjusted for s in product.matched}
    total = 0.0
    for attr in query.attributes:  # already sorted by text
        if attr in scores:
            total += scores[attr]
    return total


def build_feeds_naive(
    queries: Sequence[CollectionQuery],
    assignments: Sequence[AttributeAssignment],
    cfg: FeedConfig = FeedConfig(),
    trusted: Callable[[str], bool] | None = None,
) -> list[Collection]:
    """Reference all-pairs implementation: every query against every product."""
    ordered = sorted(assignments, key=lambda a: a.product_id)
    collections = []
    for query in queries:
        entries = []
        for assignment in ordered:
            if trusted is not None and not trusted(assignment.product_id):
                continue
            scores = {s.attribute: s.adjusted for s in assignment.matched}
            present = [a for a in query.attributes if a in scores]
            if cfg.require_all_attributes and len(present) < len(query.attributes):
                continue
            if not present:
                continue
            total = 0.0
            contributing = []
            for attr in present:
                score = scores[attr]
                contributing.append((attr, score))
                total += score
            if total < cfg.min_relevance:
                continue
            entries.append(FeedEntry(assignment.product_id, total, tuple(contributing)))
        entries.sort(key=lambda e: (-e.relevance, e.product_id))
        if len(entries) >= cfg.min_products:
            collections.append(Collection(query, tuple(entries)))
    collections.sort(key=lambda c: c.query.title)
    return collections


class _AssignmentIndex:
    """Frozen inverted index over assignments: postings plus CSR scores."""

    def __init__(self, assignments: Sequence[AttributeAssignment]):
        self.assignments = sorted(assignments, key=lambda a: a.product_id)
        self.product_ids = [a.product_id for a in self.assignments]
        attr_set: set[Attribute] = set()
        for assignment in self.assignments:
            attr_set.update(s.attribute for s in assignment.matched)
        self.attr_list = sorted(attr_set, key=attribute_sort_key)
        self.attr_id = {attr: i for i, attr in enumerate(self.attr_list)}

        indptr = [0]
        flat_ids: list[int] = []
        flat_scores: list[float] = []
        postings: dict[int, list[int]] = {i: [] for i in range(len(self.attr_list))}
        for row, assignment in enumerate(self.assignments):
            pairs = sorted(
                ((self.attr_id[s.attribute], s.adjusted) for s in assignment.matched),
            )
            for aid, score in pairs:
                flat_ids.append(aid)
                flat_scores.append(score)
                postings[aid].append(row)
            indptr.append(len(flat_ids))
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.flat_ids = np.asarray(flat_ids, dtype=np.int64)
        self.flat_scores = np.asarray(flat_scores, dtype=np.float64)
        self.postings = {
            aid: np.asarray(rows, dtype=np.int64) for aid, rows in postings.items()
        }

    def candidates(self, attr_ids: list[int], require_all: bool) -> np.ndarray:
        lists = [self.postings[aid] for aid in attr_ids]
        if require_all:
            return kernels.intersect_sorted(lists)
        merged = np.unique(np.concatenate(lists)) if lists else np.zeros(0, np.int64)
        return merged.astype(np.int64)


def _feed_for_query(
    query: CollectionQuery,
    index: _AssignmentIndex,
    cfg: FeedConfig,
    trusted: Callable[[str], bool] | None,
) -> Collection | None:
    attr_ids = []
    for attr in query.attributes:
        aid = index.attr_id.get(attr)
        if aid is None:
            if cfg.require_all_attributes:
                return None
            continue
        attr_ids.append(aid)
    if not attr_ids:
        return None
    cand = index.candidates(attr_ids, cfg.require_all_attributes)
    if trusted is not None and cand.size:
        mask = np.fromiter(
            (trusted(index.product_ids[int(r)]) for r in cand), bool, count=cand.size
        )
        cand = cand[mask]
    if cand.size == 0:
        return None
    query_ids = np.asarray(attr_ids, dtype=np.int64)  # ascending = attr text order
    rel, contrib = kernels.relevance_for_candidates(
        cand, index.indptr, index.flat_ids, index.flat_scores, query_ids
    )
    entries = []
    for i in range(cand.size):
        total = float(rel[i])
        if total < cfg.min_relevance:
            continue
        contributing = tuple(
            (index.attr_list[int(query_ids[j])], float(contrib[i, j]))
            for j in range(query_ids.size)
            if not np.isnan(contrib[i, j])
        )
        if not contributing:
            continue
        entries.append(FeedEntry(index.product_ids[int(cand[i])], total, contributing))
    entries.sort(key=lambda e: (-e.relevance, e.product_id))
    if len(entries) < cfg.min_products:
        return None
    return Collection(query, tuple(entries))


def build_feeds(
    queries: Sequence[CollectionQuery],
    assignments: Sequence[AttributeAssignment],
    cfg: FeedConfig = FeedConfig(),
    trusted: Callable[[str], bool] | None = None,
    workers: int = 1,
) -> list[Collection]:
    """Indexed feed construction; output equals ``build_feeds_naive`` exactly.

    Candidates come from intersecting (or uniting, when
    ``require_all_attributes`` is off) per-attribute posting lists; scores
    are then accumulated only for candidates.  Queries are independent, so
    ``workers`` may fan them out across threads without changing the output.
    """
    index = _AssignmentIndex(assignments)
    if workers > 1 and len(queries) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            maybe = list(
                pool.map(lambda q: _feed_for_query(q, index, cfg, trusted), queries)
            )
    else:
        maybe = [_feed_for_query(q, index, cfg, trusted) for q in queries]
    collections = [c for c in maybe if c is not None]
    collections.sort(key=lambda c: c.query.title)
    return collections


def related_collections(
    collections: Sequence[Collection],
    head: ProjectionHead,
    store: EmbeddingStore,
    k: int,
    fallback: Callable[[str], np.ndarray] | None = None,
) -> dict[str, list[tuple[str, float]]]:
    """Top-k nearest collections by embedding cosine, excluding self.

    A collection's embedding is the unit-normalized mean of its attributes'
    projected embeddings.  Ties break by title.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    titles = []
    vectors = []
    for collection in collections:
        attrs = collection.query.attributes
        projected = []
        for attr in attrs:
            base = store.resolve(
                attribute_key(attr),
                None if fallback is None else (lambda key, a=attr: fallback(a.text)),
            )
            vec = head.project_attribute(base)
            norm = float(np.linalg.norm(vec))
            if norm == 0.0:
                continue
            projected.append(vec / norm)
        if not projected:
            raise DegenerateInputError(
                f"collection {collection.query.title!r} has no embeddable attributes"
            )
        mean = np.mean(projected, axis=0)
        norm = float(np.linalg.norm(mean))
        if norm == 0.0:
            raise DegenerateInputError(
                f"collection {collection.query.title!r} embeds to the zero vector"
            )
        titles.append(collection.query.title)
        vectors.append(mean / norm)
    out: dict[str, list[tuple[str, float]]] = {}
    if not titles:
        return out
    matrix = np.stack(vectors)
    sims = np.clip(matrix @ matrix.T, -1.0, 1.0)
    for i, title in enumerate(titles):
        others = [
            (titles[j], float(sims[i, j])) for j in range(len(titles)) if j != i
        ]
        others.sort(key=lambda pair: (-pair[1], pair[0]))
        out[title] = others[:k]
    return out


def save_collections(collections: Sequence[Collection], path: str | Path) -> int:
    return write_jsonl_atomic(path, (c.to_record() for c in collections))


def load_collections(
    path: str | Path, schema: CategorySchema = DEFAULT_SCHEMA
) -> list[Collection]:
    out = []
    for lineno, record in read_jsonl(path):
        try:
            attrs = tuple(
                Attribute.parse(a["category"], a["value"], schema)
                for a in record["attributes"]
            )
            query = CollectionQuery(str(record["title"]), attrs, searchability=5)
            entries = tuple(
                FeedEntry(
                    str(p["product_id"]),
                    float(p["relevance"]),
                    tuple(
                        (Attribute.parse(c["category"], c["value"], schema), float(c["score"]))
                        for c in p["contributing"]
                    ),
                )
                for p in record["products"]
            )
            out.append(Collection(query, entries))
        except (KeyError, AnnotationError) as exc:
            raise InputFormatError(f"{path}: line {lineno}: {exc}") from None
    return out


def save_related(related: Mapping[str, list[tuple[str, float]]], path: str | Path) -> int:
    def rows():
        for title in sorted(related):
            yield {
                "title": title,
                "related": [
                    {"title": t, "similarity": s} for t, s in related[title]
                ],
            }

    return write_jsonl_atomic(path, rows())
