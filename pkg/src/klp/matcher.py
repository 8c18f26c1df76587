"""Score products against the vocabulary and emit thresholded assignments.

Raw cosine similarities get a frequency-based multiplicative weight before
thresholding.  Model scores tend to flatten the natural long tail of
attribute popularity — common attributes come out too low, rare ones too
high — so each attribute's similarity is scaled by ``a + b * frequency**0.5``
(sublinear, so very popular attributes don't dominate outright).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .catalog import Attribute, CategorySchema, DEFAULT_SCHEMA, attribute_sort_key
from .embed import EmbeddingStore, ProjectionHead, attribute_key
from .errors import DegenerateInputError, DimensionMismatchError, InputFormatError
from .jsonl import read_jsonl, write_jsonl_atomic
from .vocab import AttributeVocabulary


@dataclass(frozen=True)
class WeightConfig:
    a: float = 1.0
    b: float = 0.01
    exponent: float = 0.5

    def __post_init__(self):
        if self.a < 0 or self.b < 0:
            raise ValueError("weight coefficients must be nonnegative")


@dataclass(frozen=True)
class MatcherConfig:
    theta: float = 0.5
    weights: WeightConfig = field(default_factory=WeightConfig)
    max_attributes_per_product: int | None = None
    threshold_on_raw: bool = False

    def __post_init__(self):
        if not np.isfinite(self.theta):
            raise ValueError("theta must be finite")
        if self.max_attributes_per_product is not None and self.max_attributes_per_product < 1:
            raise ValueError("max_attributes_per_product must be positive")


def attribute_weight(frequency: int, cfg: WeightConfig = WeightConfig()) -> float:
    """Popularity weight ``a + b * frequency**exponent``.

    This is the single weight formula for the whole pipeline; feed building
    reuses it verbatim so both phases see bit-identical values.
    """
    if frequency < 0:
        raise ValueError("frequency must be nonnegative")
    return cfg.a + cfg.b * frequency**cfg.exponent


@dataclass(frozen=True)
class ScoredAttribute:
    attribute: Attribute
    raw_sim: float
    weight: float
    adjusted: float

    @classmethod
    def make(cls, attribute: Attribute, raw_sim: float, weight: float) -> "ScoredAttribute":
        return cls(attribute, raw_sim, weight, weight * raw_sim)


@dataclass(frozen=True)
class AttributeAssignment:
    """The attributes matched to one product, highest adjusted score first."""

    product_id: str
    matched: tuple[ScoredAttribute, ...]

    def score_of(self, attr: Attribute) -> float | None:
        for scored in self.matched:
            if scored.attribute == attr:
                return scored.adjusted
        return None

    def to_record(self) -> dict:
        return {
            "product_id": self.product_id,
            "matched": [
                {
                    "category": s.attribute.category,
                    "value": s.attribute.value,
                    "raw_sim": s.raw_sim,
                    "weight": s.weight,
                    "adjusted": s.adjusted,
                }
                for s in self.matched
            ],
        }


@dataclass
class ScoreCache:
    """Per-attribute constants reused across every product.

    Holds the projected, unit-normalized attribute embeddings and the
    popularity weights (the product-independent parts of the adjusted
    score); per-product similarities are computed on demand.
    """

    attributes: tuple[Attribute, ...]
    matrix: np.ndarray  # (n_attributes, dim), unit rows
    weights: np.ndarray  # (n_attributes,)

    def __len__(self) -> int:
        return len(self.attributes)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def build_score_cache(
    vocab: AttributeVocabulary,
    head: ProjectionHead,
    store: EmbeddingStore,
    cfg: WeightConfig = WeightConfig(),
    fallback: Callable[[str], np.ndarray] | None = None,
) -> ScoreCache:
    """Project and weight every retained attribute exactly once.

    ``fallback`` (attribute text → base vector) covers attributes missing
    from the store; when it is None a missing attribute is an error.
    """
    attrs = tuple(sorted(vocab.retained, key=attribute_sort_key))
    if not attrs:
        return ScoreCache(attrs, np.zeros((0, head.dim)), np.zeros(0))
    base = np.stack(
        [
            store.resolve(
                attribute_key(attr),
                None if fallback is None else (lambda key, a=attr: fallback(a.text)),
            )
            for attr in attrs
        ]
    )
    projected = head.project_attribute(base)
    norms = np.linalg.norm(projected, axis=1)
    if np.any(norms == 0.0):
        bad = attrs[int(np.argmin(norms))]
        raise DegenerateInputError(f"attribute {bad.text} projects to the zero vector")
    matrix = projected / norms[:, None]
    weights = np.array(
        [attribute_weight(vocab.frequencies.count(a), cfg) for a in attrs]
    )
    return ScoreCache(attrs, matrix, weights)


def score_product(product_emb: np.ndarray, cache: ScoreCache) -> list[ScoredAttribute]:
    """Score one unit-norm product embedding against every cached attribute.

    Output is sorted by adjusted score descending, ties broken by attribute
    text ascending.
    """
    emb = np.asarray(product_emb, dtype=np.float64)
    if len(cache) == 0:
        return []
    if emb.shape != (cache.dim,):
        raise DimensionMismatchError(
            f"product embedding has shape {emb.shape}, cache dim is {cache.dim}"
        )
    if abs(float(np.linalg.norm(emb)) - 1.0) > 1e-6:
        raise ValueError("product embedding must be unit-norm")
    raw = np.clip(cache.matrix @ emb, -1.0, 1.0)
    adjusted = cache.weights * raw
    order = sorted(range(len(cache)), key=lambda i: (-adjusted[i], cache.attributes[i].text))
    return [
        ScoredAttribute(cache.attributes[i], float(raw[i]), float(cache.weights[i]), float(adjusted[i]))
        for i in order
    ]


def assign_attributes(
    scored: Sequence[ScoredAttribute], cfg: MatcherConfig, product_id: str = ""
) -> AttributeAssignment:
    """Keep the entries at or above theta, truncated to the optional cap."""
    if cfg.threshold_on_raw:
        kept = [s for s in scored if s.raw_sim >= cfg.theta]
    else:
        kept = [s for s in scored if s.adjusted >= cfg.theta]
    if cfg.max_attributes_per_product is not None:
        kept = kept[: cfg.max_attributes_per_product]
    return AttributeAssignment(product_id, tuple(kept))


def assign_many(
    product_ids: Sequence[str],
    product_matrix: np.ndarray,
    cache: ScoreCache,
    cfg: MatcherConfig,
) -> list[AttributeAssignment]:
    """Vectorized scoring + thresholding for a chunk of unit-norm products.

    Equivalent to ``assign_attributes(score_product(...))`` per product but
    only materializes entries that survive the threshold.
    """
    mat = np.asarray(product_matrix, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] != len(product_ids):
        raise DimensionMismatchError("product_matrix rows must match product_ids")
    if len(cache) == 0:
        return [AttributeAssignment(pid, ()) for pid in product_ids]
    raw = np.clip(mat @ cache.matrix.T, -1.0, 1.0)
    adjusted = raw * cache.weights[None, :]
    gate = raw if cfg.threshold_on_raw else adjusted
    out = []
    for row, pid in enumerate(product_ids):
        idx = np.flatnonzero(gate[row] >= cfg.theta)
        ordered = sorted(idx, key=lambda i: (-adjusted[row, i], cache.attributes[i].text))
        if cfg.max_attributes_per_product is not None:
            ordered = ordered[: cfg.max_attributes_per_product]
        out.append(
            AttributeAssignment(
                pid,
                tuple(
                    ScoredAttribute(
                        cache.attributes[i],
                        float(raw[row, i]),
                        float(cache.weights[i]),
                        float(adjusted[row, i]),
                    )
                    for i in ordered
                ),
            )
        )
    return out


def save_assignments(assignments: Sequence[AttributeAssignment], path: str | Path) -> int:
    return write_jsonl_atomic(path, (a.to_record() for a in assignments))


def load_assignments(
    path: str | Path, schema: CategorySchema = DEFAULT_SCHEMA
) -> list[AttributeAssignment]:
    out = []
    for lineno, record in read_jsonl(path):
        try:
            matched = tuple(
                ScoredAttribute(
                    Attribute.parse(m["category"], m["value"], schema),
                    float(m["raw_sim"]),
                    float(m["weight"]),
                    float(m["adjusted"]),
                )
                for m in record["matched"]
            )
            out.append(AttributeAssignment(str(record["product_id"]), matched))
        except KeyError as exc:
            raise InputFormatError(f"{path}: line {lineno}: missing field {exc}") from None
    return out
