"""Stage implementations behind the ``klp`` CLI.

Eight composable stages: ingest, curate, train, match, querygen, feedgen,
eval, related.  Every stage writes its outputs atomically, records digests
in the run manifest, verifies its upstream artifacts through those digests,
and no-ops when nothing changed (unless forced).  Identical config, inputs,
and seed produce byte-identical outputs at any worker count.
"""

from __future__ import annotations

import dataclasses
import logging
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import (
    catalog as catalog_mod,
    clients,
    feedgen,
    matcher,
    metrics,
    querygen,
    vocab as vocab_mod,
)
from .config import PipelineConfig, config_hash
from .embed import (
    EmbeddingStore,
    attribute_key,
    hash_embed,
    image_key,
    load_embeddings,
    load_head,
    save_head,
    text_key,
    train_projection,
)
from .errors import DegenerateInputError
from .jsonl import write_jsonl_atomic
from .manifest import (
    MissingUpstreamError,
    RunManifest,
    StageRecord,
    file_digest,
    load_manifest,
    now_iso,
    save_manifest,
)

log = logging.getLogger(__name__)

STAGE_ORDER = (
    "ingest",
    "curate",
    "train",
    "match",
    "querygen",
    "feedgen",
    "eval",
    "related",
)

STAGE_VERSIONS = {stage: "1" for stage in STAGE_ORDER}

UPSTREAM: dict[str, tuple[str, ...]] = {
    "ingest": (),
    "curate": ("ingest",),
    "train": ("ingest", "curate"),
    "match": ("ingest", "curate", "train"),
    "querygen": ("match", "curate"),
    "feedgen": ("querygen", "match"),
    "eval": ("ingest", "curate", "match"),
    "related": ("feedgen", "train"),
}

OUTPUTS: dict[str, tuple[str, ...]] = {
    "ingest": ("catalog.jsonl", "annotations.jsonl"),
    "curate": ("vocabulary.jsonl",),
    "train": ("head.jsonl",),
    "match": ("assignments.jsonl",),
    "querygen": ("queries.jsonl",),
    "feedgen": ("collections.jsonl",),
    "eval": ("report.jsonl",),
    "related": ("related.jsonl",),
}

_CHUNK = 256  # fixed scoring chunk so results don't depend on worker count


@dataclasses.dataclass
class StageResult:
    stage: str
    skipped: bool
    row_counts: dict[str, int]


def default_rules_path() -> Path:
    return Path(str(resources.files("klp.data").joinpath("default_rules.jsonl")))


def _stage_inputs(stage: str, config: PipelineConfig) -> list[str]:
    out = config.output_path
    paths: list[str] = []
    if stage == "ingest":
        paths = [config.paths.catalog, config.paths.annotations]
    elif stage == "curate":
        paths = [str(out("catalog.jsonl")), str(out("annotations.jsonl"))]
        if config.paths.review_list:
            paths.append(config.paths.review_list)
        if config.paths.embeddings:
            paths.append(config.paths.embeddings)
    elif stage == "train":
        paths = [str(out("annotations.jsonl")), str(out("vocabulary.jsonl"))]
        if config.paths.embeddings:
            paths.append(config.paths.embeddings)
    elif stage == "match":
        paths = [
            str(out("catalog.jsonl")),
            str(out("vocabulary.jsonl")),
            str(out("head.jsonl")),
        ]
        if config.paths.embeddings:
            paths.append(config.paths.embeddings)
    elif stage == "querygen":
        paths = [str(out("assignments.jsonl")), str(out("vocabulary.jsonl"))]
        paths.append(config.paths.rules or str(default_rules_path()))
    elif stage == "feedgen":
        paths = [str(out("queries.jsonl")), str(out("assignments.jsonl"))]
    elif stage == "eval":
        paths = [
            str(out("annotations.jsonl")),
            str(out("vocabulary.jsonl")),
            str(out("assignments.jsonl")),
        ]
        if out("collections.jsonl").exists():
            # soft dependency: collection precision is reported when feeds exist
            paths.append(str(out("collections.jsonl")))
    elif stage == "related":
        paths = [str(out("collections.jsonl")), str(out("head.jsonl"))]
        if config.paths.embeddings:
            paths.append(config.paths.embeddings)
    return paths


def _check_upstream(stage: str, config: PipelineConfig, manifest: RunManifest) -> None:
    for upstream in UPSTREAM[stage]:
        record = manifest.record(upstream)
        if record is None:
            raise MissingUpstreamError(
                f"stage {stage!r} needs outputs of stage {upstream!r}; "
                f"run 'klp {upstream}' first"
            )
        for path, digest in record.outputs.items():
            if not Path(path).exists():
                raise MissingUpstreamError(
                    f"stage {stage!r}: upstream file {path} (from {upstream!r}) is missing"
                )
            if file_digest(path) != digest:
                raise MissingUpstreamError(
                    f"stage {stage!r}: upstream file {path} changed since "
                    f"{upstream!r} ran; rerun it"
                )


def run_stage(
    stage: str,
    config: PipelineConfig,
    force: bool = False,
    llm_client: clients.ChatClient | None = None,
) -> StageResult:
    """Run one stage with manifest bookkeeping; no-op when digests match."""
    if stage not in STAGE_ORDER:
        raise ValueError(f"unknown stage {stage!r}; expected one of {STAGE_ORDER}")
    out_dir = Path(config.paths.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(out_dir)
    _check_upstream(stage, config, manifest)

    inputs = {}
    for path in _stage_inputs(stage, config):
        if not Path(path).exists():
            raise MissingUpstreamError(f"stage {stage!r}: required input {path} is missing")
        inputs[path] = file_digest(path)
    digest_of_config = config_hash(config)

    previous = manifest.record(stage)
    output_paths = [str(config.output_path(name)) for name in OUTPUTS[stage]]
    if (
        not force
        and previous is not None
        and previous.config_hash == digest_of_config
        and previous.inputs == inputs
        and all(Path(p).exists() for p in output_paths)
        and all(file_digest(p) == previous.outputs.get(p) for p in output_paths)
    ):
        log.info("stage %s: inputs unchanged, skipping (use --force to rerun)", stage)
        return StageResult(stage, skipped=True, row_counts=dict(previous.row_counts))

    record = StageRecord(
        version=STAGE_VERSIONS[stage],
        config_hash=digest_of_config,
        inputs=inputs,
        started_at=now_iso(),
    )
    runner = _STAGE_BODIES[stage]
    row_counts = runner(config, llm_client)
    record.row_counts = row_counts
    record.outputs = {path: file_digest(path) for path in output_paths}
    record.finished_at = now_iso()
    manifest.stages[stage] = record
    save_manifest(manifest, out_dir)
    log.info("stage %s: %s", stage, row_counts)
    return StageResult(stage, skipped=False, row_counts=row_counts)


# ---------------------------------------------------------------------------
# Stage bodies
# ---------------------------------------------------------------------------


def _hash_embedder(config: PipelineConfig, dimension: int) -> Callable[[str], np.ndarray]:
    seed = config.embed.hash_seed
    return lambda text: hash_embed(text, dimension, seed)


def _load_store(config: PipelineConfig) -> EmbeddingStore:
    if config.paths.embeddings:
        return load_embeddings(config.paths.embeddings)
    return EmbeddingStore(config.embed.d_base)


def _materialize_product_keys(
    store: EmbeddingStore, cat: catalog_mod.Catalog, config: PipelineConfig
) -> None:
    embed_text = _hash_embedder(config, store.dimension)
    for product in cat:
        img_key = image_key(product.id)
        if img_key not in store:
            store.add(img_key, embed_text("image " + product.image_ref))
        txt_key = text_key(product.id)
        if txt_key not in store:
            store.add(txt_key, embed_text(product.title + " " + product.description))


def _materialize_attribute_keys(
    store: EmbeddingStore, attrs: Sequence[catalog_mod.Attribute], config: PipelineConfig
) -> None:
    embed_text = _hash_embedder(config, store.dimension)
    for attr in attrs:
        key = attribute_key(attr)
        if key not in store:
            store.add(key, embed_text(attr.text))


def _stage_ingest(config: PipelineConfig, _client) -> dict[str, int]:
    cat = catalog_mod.load_catalog(config.paths.catalog)
    annotations = catalog_mod.load_annotations(config.paths.annotations, cat, config.schema)
    n_products = catalog_mod.save_catalog(cat, config.output_path("catalog.jsonl"))
    n_annotations = catalog_mod.save_annotations(
        annotations, config.output_path("annotations.jsonl")
    )
    return {"products": n_products, "annotations": n_annotations}


def _stage_curate(config: PipelineConfig, _client) -> dict[str, int]:
    cat = catalog_mod.load_catalog(config.output_path("catalog.jsonl"))
    annotations = catalog_mod.load_annotations(
        config.output_path("annotations.jsonl"), cat, config.schema
    )
    table = vocab_mod.count_frequencies(annotations)
    kept = vocab_mod.frequency_filter(table, config.vocab.min_frequency)

    store = _load_store(config) if config.paths.embeddings else None
    hash_fallback = _hash_embedder(
        config, store.dimension if store is not None else config.embed.d_base
    )

    def embed_attr_text(text: str) -> np.ndarray:
        if store is not None and attribute_key(text) in store:
            return store.get(attribute_key(text))
        return hash_fallback(text)

    vocabulary = vocab_mod.semantic_dedup(
        kept,
        table,
        embed_attr_text,
        config.vocab.dedup_threshold,
        cross_category=config.vocab.dedup_cross_category,
    )
    if config.paths.review_list:
        review = vocab_mod.load_review_list(config.paths.review_list, config.schema)
        vocabulary = vocab_mod.apply_review_list(vocabulary, review)
    rows = vocab_mod.save_vocabulary(vocabulary, config.output_path("vocabulary.jsonl"))
    return {"retained": rows, "merged": len(vocabulary.canonical_map)}


def _stage_train(config: PipelineConfig, _client) -> dict[str, int]:
    cat = catalog_mod.load_catalog(config.output_path("catalog.jsonl"))
    annotations = catalog_mod.load_annotations(
        config.output_path("annotations.jsonl"), cat, config.schema
    )
    vocabulary = vocab_mod.load_vocabulary(
        config.output_path("vocabulary.jsonl"), config.schema
    )
    pairs = []
    for ann in annotations:
        for attr in ann.attributes:
            canonical = vocabulary.canonicalize(attr)
            if canonical is not None:
                pairs.append((ann.product_id, canonical))
    pairs.sort(key=lambda pair: (pair[0], pair[1].text))

    store = _load_store(config)
    _materialize_product_keys(store, cat, config)
    _materialize_attribute_keys(store, vocabulary.retained, config)

    trainer_cfg = dataclasses.replace(config.trainer, seed=config.run.seed)
    head = train_projection(store, pairs, trainer_cfg)
    save_head(head, config.output_path("head.jsonl"))
    return {"pairs": len(pairs), "epochs": config.trainer.epochs}


def _stage_match(config: PipelineConfig, _client) -> dict[str, int]:
    cat = catalog_mod.load_catalog(config.output_path("catalog.jsonl"))
    vocabulary = vocab_mod.load_vocabulary(
        config.output_path("vocabulary.jsonl"), config.schema
    )
    head = load_head(config.output_path("head.jsonl"))
    store = _load_store(config)
    _materialize_product_keys(store, cat, config)
    hash_fallback = _hash_embedder(config, store.dimension)
    cache = matcher.build_score_cache(
        vocabulary, head, store, config.matcher.weights, fallback=hash_fallback
    )

    ids = cat.ids
    chunks = [ids[i : i + _CHUNK] for i in range(0, len(ids), _CHUNK)]

    def run_chunk(chunk_ids: list[str]) -> list[matcher.AttributeAssignment]:
        img = np.stack([store.get(image_key(pid)) for pid in chunk_ids])
        txt = np.stack([store.get(text_key(pid)) for pid in chunk_ids])
        proj = head.project_image(img) + head.project_text(txt)
        norms = np.linalg.norm(proj, axis=1)
        if np.any(norms < 1e-12):
            bad = chunk_ids[int(np.argmin(norms))]
            raise DegenerateInputError(f"product {bad!r} embeds to the zero vector")
        return matcher.assign_many(chunk_ids, proj / norms[:, None], cache, config.matcher)

    if config.run.workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=config.run.workers) as pool:
            per_chunk = list(pool.map(run_chunk, chunks))
    else:
        per_chunk = [run_chunk(chunk) for chunk in chunks]
    assignments = [assignment for chunk in per_chunk for assignment in chunk]
    matcher.save_assignments(assignments, config.output_path("assignments.jsonl"))
    total_matched = sum(len(a.matched) for a in assignments)
    return {"products": len(assignments), "assigned_attributes": total_matched}


def _stage_querygen(config: PipelineConfig, llm_client) -> dict[str, int]:
    assignments = matcher.load_assignments(
        config.output_path("assignments.jsonl"), config.schema
    )
    vocabulary = vocab_mod.load_vocabulary(
        config.output_path("vocabulary.jsonl"), config.schema
    )
    rules_path = config.paths.rules or default_rules_path()
    rules = querygen.load_rules(rules_path, config.schema)

    combos = querygen.enumerate_combinations(assignments, config.querygen.min_support)
    generated: list[querygen.GeneratedQuery] = []
    if combos:
        quantiles = querygen.compute_support_quantiles(
            [c.support for c in combos], vocabulary.frequencies
        )
        template = None
        if llm_client is not None:
            if config.paths.prompt_template:
                template = clients.PromptTemplate(
                    system_text="You write and judge search-friendly collection titles.",
                    user_template=open(
                        config.paths.prompt_template, encoding="utf-8"
                    ).read(),
                )
            else:
                template = clients.query_generation_template()
        for combo in combos:
            valid, reason = querygen.validate_combination(combo, rules)
            if not valid:
                continue
            if llm_client is not None:
                generated.append(querygen.generate_with_llm(combo, llm_client, template))
            else:
                generated.append(
                    querygen.GeneratedQuery(
                        combination=combo,
                        title=querygen.synthesize_title_fallback(combo),
                        searchability=querygen.score_searchability_fallback(
                            combo, vocabulary.frequencies, quantiles
                        ),
                        valid=True,
                        generator="fallback",
                    )
                )
    kept = querygen.filter_queries(generated, config.querygen.min_score)
    querygen.save_queries(kept, config.output_path("queries.jsonl"))
    return {"combinations": len(combos), "validated": len(generated), "kept": len(kept)}


def _stage_feedgen(config: PipelineConfig, _client) -> dict[str, int]:
    queries = querygen.load_queries(config.output_path("queries.jsonl"), config.schema)
    assignments = matcher.load_assignments(
        config.output_path("assignments.jsonl"), config.schema
    )
    collection_queries = [feedgen.CollectionQuery.from_query(q) for q in queries]
    collections = feedgen.build_feeds(
        collection_queries,
        assignments,
        config.feedgen,
        workers=config.run.workers,
    )
    feedgen.save_collections(collections, config.output_path("collections.jsonl"))
    return {"queries": len(queries), "collections": len(collections)}


def _stage_eval(config: PipelineConfig, _client) -> dict[str, int]:
    cat = catalog_mod.load_catalog(config.output_path("catalog.jsonl"))
    annotations = catalog_mod.load_annotations(
        config.output_path("annotations.jsonl"), cat, config.schema
    )
    vocabulary = vocab_mod.load_vocabulary(
        config.output_path("vocabulary.jsonl"), config.schema
    )
    assignments = matcher.load_assignments(
        config.output_path("assignments.jsonl"), config.schema
    )

    truth: dict[str, set] = defaultdict(set)
    for ann in annotations:
        for attr in ann.attributes:
            canonical = vocabulary.canonicalize(attr)
            if canonical is not None:
                truth[ann.product_id].add(canonical)

    examples = []
    assigned_counts: dict[catalog_mod.Attribute, int] = defaultdict(int)
    for assignment in assignments:
        for scored in assignment.matched:
            assigned_counts[scored.attribute] += 1
        if truth.get(assignment.product_id):
            examples.append(
                metrics.LabeledExample(
                    assignment.product_id,
                    frozenset(truth[assignment.product_id]),
                    assignment.matched,
                )
            )

    rows: list[dict] = []
    for k in config.eval.recall_ks:
        if examples:
            rows.append(metrics.recall_at_k(examples, k).to_record())
    collections_path = config.output_path("collections.jsonl")
    if collections_path.exists():
        collections = feedgen.load_collections(collections_path, config.schema)
        truth_map = {a.product_id: frozenset(truth.get(a.product_id, ())) for a in assignments}
        for report_row in metrics.precision_at_k(
            collections, truth_map, config.eval.precision_k
        ):
            rows.append(report_row.to_record())
    try:
        rho, _ = metrics.distribution_alignment(assigned_counts, vocabulary.frequencies)
        shared = len(set(assigned_counts) & set(vocabulary.frequencies))
        rows.append({"metric": "distribution_alignment", "value": rho, "n": shared})
    except metrics.MetricError as exc:
        log.warning("skipping distribution alignment: %s", exc)
    write_jsonl_atomic(config.output_path("report.jsonl"), rows)
    return {"examples": len(examples), "reports": len(rows)}


def _stage_related(config: PipelineConfig, _client) -> dict[str, int]:
    collections = feedgen.load_collections(
        config.output_path("collections.jsonl"), config.schema
    )
    head = load_head(config.output_path("head.jsonl"))
    store = _load_store(config)
    hash_fallback = _hash_embedder(config, store.dimension)
    related = feedgen.related_collections(
        collections, head, store, config.related.k, fallback=hash_fallback
    )
    feedgen.save_related(related, config.output_path("related.jsonl"))
    return {"collections": len(collections)}


_STAGE_BODIES = {
    "ingest": _stage_ingest,
    "curate": _stage_curate,
    "train": _stage_train,
    "match": _stage_match,
    "querygen": _stage_querygen,
    "feedgen": _stage_feedgen,
    "eval": _stage_eval,
    "related": _stage_related,
}
