"""Recall@k, precision@k, and long-tail alignment diagnostics.

Pure functions over pipeline outputs: no hidden state, repeated calls give
identical reports.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .catalog import Attribute, attribute_sort_key
from .errors import KlpError
from .feedgen import Collection
from .jsonl import write_jsonl_atomic
from .matcher import ScoredAttribute
from .vocab import FrequencyTable


class MetricError(KlpError):
    pass


@dataclass(frozen=True)
class LabeledExample:
    product_id: str
    true_attributes: frozenset[Attribute]
    predicted: tuple[ScoredAttribute, ...]  # sorted by adjusted desc


@dataclass(frozen=True)
class MetricReport:
    metric: str
    k: int
    value: float
    n: int
    category: str | None = None

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"metric value {self.value} outside [0, 1]")

    def to_record(self) -> dict:
        record = {"metric": self.metric, "k": self.k, "value": self.value, "n": self.n}
        if self.category is not None:
            record["category"] = self.category
        return record


def recall_at_k(
    examples: Sequence[LabeledExample], k: int, all_must_hit: bool = False
) -> MetricReport:
    """Fraction of examples whose truth intersects the top-k predictions.

    With ``all_must_hit`` every true attribute has to appear in the top k,
    the stricter reading for multi-attribute ground truth.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    if not examples:
        raise MetricError("recall over an empty example list is undefined")
    hits = 0
    for example in examples:
        top = {scored.attribute for scored in example.predicted[:k]}
        if all_must_hit:
            hit = example.true_attributes <= top
        else:
            hit = bool(example.true_attributes & top)
        hits += hit
    return MetricReport("recall", k, hits / len(examples), len(examples))


def precision_at_k(
    collections: Sequence[Collection],
    truth: Mapping[str, frozenset[Attribute] | set[Attribute]],
    k: int,
) -> list[MetricReport]:
    """Per-category precision over (collection, top-k entry, query attribute).

    A triple holds when the entry's ground-truth attribute set contains the
    query attribute of that category.  The overall report is the unweighted
    mean across categories present.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    per_category: dict[str, list[int]] = {}
    for collection in collections:
        for entry in collection.entries[:k]:
            if entry.product_id not in truth:
                raise MetricError(f"product {entry.product_id!r} missing from truth")
            true_attrs = truth[entry.product_id]
            for attr in collection.query.attributes:
                per_category.setdefault(attr.category, []).append(attr in true_attrs)
    reports = []
    total_triples = 0
    for category in sorted(per_category):
        outcomes = per_category[category]
        total_triples += len(outcomes)
        reports.append(
            MetricReport(
                "precision", k, sum(outcomes) / len(outcomes), len(outcomes), category
            )
        )
    if reports:
        overall = sum(r.value for r in reports) / len(reports)
        reports.append(MetricReport("precision", k, overall, total_triples, "overall"))
    return reports


def distribution_alignment(
    predicted: Mapping[Attribute, int], training: FrequencyTable
) -> tuple[float, dict[Attribute, float]]:
    """How well assignment counts track the training frequency distribution.

    Returns the Spearman rank correlation between per-attribute assignment
    counts and training frequencies over the shared attributes, plus the
    predicted/training ratio per attribute.  The complaint this diagnoses is
    ordinal (common attributes under-ranked, rare ones over-ranked), hence
    rank correlation rather than Pearson.
    """
    shared = sorted(set(predicted) & set(training), key=attribute_sort_key)
    if len(shared) < 3:
        raise MetricError(
            f"need at least 3 shared attributes for a rank correlation, got {len(shared)}"
        )
    pred = np.asarray([predicted[a] for a in shared], dtype=np.float64)
    train = np.asarray([training[a] for a in shared], dtype=np.float64)
    rho = float(stats.spearmanr(pred, train).statistic)
    ratios = {
        attr: (predicted[attr] / training[attr] if training[attr] else math.inf)
        for attr in shared
    }
    return rho, ratios


def render_precision_table(reports: Sequence[MetricReport]) -> str:
    """Plain-text table of per-category precision for human reading."""
    rows = [r for r in reports if r.metric == "precision"]
    width = max([len(r.category or "") for r in rows] + [8])
    lines = [f"{'Category'.ljust(width)}  Precision@k      n"]
    lines.append("-" * len(lines[0]))
    for report in rows:
        name = (report.category or "").ljust(width)
        lines.append(f"{name}  {report.value:11.2f}  {report.n:5d}")
    return "\n".join(lines)


def save_reports(reports: Sequence[MetricReport], path: str | Path) -> int:
    return write_jsonl_atomic(path, (r.to_record() for r in reports))
