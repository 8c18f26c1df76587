"""Synthetic desk-scale datasets with planted, recoverable structure.

Attribute popularity follows a power law, every product's base embeddings
are noisy mixtures of its true attributes' embeddings, and all three output
files use the same formats the loaders consume — so the whole pipeline can
run hermetically and be checked against known ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .catalog import (
    ANCHOR_CATEGORIES,
    Attribute,
    CategorySchema,
    DEFAULT_SCHEMA,
    attribute_sort_key,
)
from .embed import EmbeddingStore, attribute_key, image_key, save_embeddings, text_key
from .jsonl import write_jsonl_atomic


@dataclass(frozen=True)
class SynthSpec:
    n_products: int
    attributes_per_category: Mapping[str, int]
    frequency_exponent: float = 1.2
    attrs_per_product: tuple[int, int] = (3, 6)
    noise_rate: float = 0.1
    seed: int = 0
    embedding_dim: int = 256
    # Dampens mixture coefficients of popular attributes by freq**-damping,
    # reproducing the "model smooths the long tail" failure mode so the
    # popularity weight has something to correct.
    common_damping: float = 0.0

    def __post_init__(self):
        if self.n_products < 1:
            raise ValueError("n_products must be positive")
        if not 0.0 <= self.noise_rate < 1.0:
            raise ValueError("noise_rate must be in [0, 1)")
        if not any(
            c in ANCHOR_CATEGORIES and n > 0
            for c, n in self.attributes_per_category.items()
        ):
            raise ValueError("need at least one category_l* attribute pool")
        lo, hi = self.attrs_per_product
        if not 1 <= lo <= hi:
            raise ValueError("attrs_per_product range is invalid")
        n_categories = sum(1 for n in self.attributes_per_category.values() if n > 0)
        if hi > n_categories:
            raise ValueError(
                "attrs_per_product max exceeds the number of populated categories "
                "(products hold at most one attribute per category)"
            )
        if self.embedding_dim < 8:
            raise ValueError("embedding_dim must be at least 8")
        if self.common_damping < 0:
            raise ValueError("common_damping must be nonnegative")


@dataclass(frozen=True)
class SynthOutput:
    catalog_path: Path
    annotations_path: Path
    embeddings_path: Path
    truth: dict[str, tuple[Attribute, ...]] = field(hash=False)


def _attribute_universe(spec: SynthSpec, schema: CategorySchema) -> list[Attribute]:
    attrs = []
    for category in schema.names:
        count = spec.attributes_per_category.get(category, 0)
        for j in range(count):
            attrs.append(Attribute(category, f"v{j:03d}"))
    return attrs


def generate(
    spec: SynthSpec, out_dir: str | Path, schema: CategorySchema = DEFAULT_SCHEMA
) -> SynthOutput:
    """Write catalog, ground-truth annotation, and base-embedding files.

    Per product: a popularity-weighted anchor attribute plus distinct-category
    extras, then image/text base embeddings built as
    ``(1 - noise) * mixture + noise * gaussian`` (independently for image and
    text), unit-normalized.  With zero noise the embeddings are exactly the
    mixture of the true attributes, so nearest-attribute recovery is exact.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    attrs = _attribute_universe(spec, schema)
    n_attrs = len(attrs)
    # Popularity ranks are a seeded shuffle so popularity doesn't correlate
    # with category order; weight of rank r is (r+1)**-exponent.
    rank_of = rng.permutation(n_attrs)
    weights = (1.0 + rank_of.astype(np.float64)) ** -spec.frequency_exponent
    probs = weights / weights.sum()

    anchor_idx = np.asarray(
        [i for i, a in enumerate(attrs) if a.category in ANCHOR_CATEGORIES],
        dtype=np.int64,
    )
    anchor_probs = probs[anchor_idx] / probs[anchor_idx].sum()

    if n_attrs <= spec.embedding_dim:
        # Orthonormal attribute directions: a zero-noise mixture then has
        # exactly zero similarity to every non-planted attribute, so
        # nearest-attribute recovery is guaranteed, not merely likely.
        gauss = rng.standard_normal((spec.embedding_dim, n_attrs))
        q, r = np.linalg.qr(gauss)
        attr_vectors = (q * np.where(np.diag(r) < 0, -1.0, 1.0)).T
        attr_vectors = np.ascontiguousarray(attr_vectors)
    else:
        attr_vectors = rng.standard_normal((n_attrs, spec.embedding_dim))
        attr_vectors /= np.linalg.norm(attr_vectors, axis=1, keepdims=True)

    lo, hi = spec.attrs_per_product
    truth: dict[str, tuple[Attribute, ...]] = {}
    chosen_rows: list[np.ndarray] = []
    for i in range(spec.n_products):
        k = int(rng.integers(lo, hi + 1))
        first = int(anchor_idx[rng.choice(anchor_idx.size, p=anchor_probs)])
        chosen = [first]
        used_categories = {attrs[first].category}
        guard = 0
        while len(chosen) < k:
            cand = int(rng.choice(n_attrs, p=probs))
            if attrs[cand].category not in used_categories:
                chosen.append(cand)
                used_categories.add(attrs[cand].category)
            guard += 1
            if guard > 100_000:
                raise RuntimeError("attribute sampling failed to fill a product")
        rows = np.asarray(sorted(chosen), dtype=np.int64)
        chosen_rows.append(rows)
        pid = f"p{i:05d}"
        truth[pid] = tuple(sorted((attrs[j] for j in rows), key=attribute_sort_key))

    counts = np.zeros(n_attrs, dtype=np.int64)
    for rows in chosen_rows:
        counts[rows] += 1

    store = EmbeddingStore(spec.embedding_dim)
    for idx, attr in enumerate(attrs):
        store.add(attribute_key(attr), attr_vectors[idx])

    catalog_records = []
    annotation_records = []
    for i, rows in enumerate(chosen_rows):
        pid = f"p{i:05d}"
        coef = np.ones(rows.size)
        if spec.common_damping > 0:
            coef = counts[rows].astype(np.float64) ** -spec.common_damping
        mixture = coef @ attr_vectors[rows]
        mixture /= np.linalg.norm(mixture)
        for prefix_key in (image_key, text_key):
            noise = rng.standard_normal(spec.embedding_dim)
            noise /= np.linalg.norm(noise)
            vec = (1.0 - spec.noise_rate) * mixture + spec.noise_rate * noise
            store.add(prefix_key(pid), vec / np.linalg.norm(vec))

        values = [attrs[j].value for j in rows]
        catalog_records.append(
            {
                "id": pid,
                "image_ref": f"synthetic://images/{pid}.jpg",
                "title": f"synthetic product {i}",
                "description": "item with " + " ".join(sorted(values)),
                "price": {"amount": float(9 + (i % 90)) + 0.99, "currency": "USD"},
                "merchant_tags": sorted(values)[:2],
            }
        )
        annotation_records.append(
            {
                "product_id": pid,
                "attributes": [
                    {"category": a.category, "value": a.value} for a in truth[pid]
                ],
                "source": "fixture",
            }
        )

    catalog_path = out_dir / "catalog.jsonl"
    annotations_path = out_dir / "annotations.jsonl"
    embeddings_path = out_dir / "embeddings.jsonl"
    write_jsonl_atomic(catalog_path, catalog_records)
    write_jsonl_atomic(annotations_path, annotation_records)
    save_embeddings(store, embeddings_path)
    return SynthOutput(catalog_path, annotations_path, embeddings_path, truth)
