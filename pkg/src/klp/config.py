"""Pipeline configuration: a flat, sectioned key=value file.

Unknown sections or keys are rejected so typos surface immediately.
``klp config show --defaults`` prints every default in this format.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .catalog import CategorySchema
from .embed import TrainerConfig
from .errors import ConfigError
from .feedgen import FeedConfig
from .matcher import MatcherConfig, WeightConfig
from .vocab import VocabConfig


@dataclass(frozen=True)
class PathsConfig:
    catalog: str = "catalog.jsonl"
    annotations: str = "annotations.jsonl"
    embeddings: str = ""  # optional; empty means hash-embedding fallback only
    review_list: str = ""  # optional
    rules: str = ""  # optional; empty means the packaged default rules
    prompt_template: str = ""  # optional; overrides the packaged query prompt
    output_dir: str = "out"


@dataclass(frozen=True)
class EmbedConfig:
    d_base: int = 256
    hash_seed: int = 0

    def __post_init__(self):
        if self.d_base < 8:
            raise ValueError("d_base must be at least 8")


@dataclass(frozen=True)
class QuerygenConfig:
    min_support: int = 20
    min_score: int = 4

    def __post_init__(self):
        if self.min_support < 1:
            raise ValueError("min_support must be at least 1")
        if not 1 <= self.min_score <= 5:
            raise ValueError("min_score must be in 1..5")


@dataclass(frozen=True)
class EvalConfig:
    recall_ks: tuple[int, ...] = (1, 5, 10)
    precision_k: int = 10


@dataclass(frozen=True)
class RelatedConfig:
    k: int = 5


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError("workers must be positive")


@dataclass(frozen=True)
class PipelineConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    embed: EmbedConfig = field(default_factory=EmbedConfig)
    vocab: VocabConfig = field(default_factory=VocabConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    matcher: MatcherConfig = field(default_factory=MatcherConfig)
    querygen: QuerygenConfig = field(default_factory=QuerygenConfig)
    feedgen: FeedConfig = field(default_factory=FeedConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    related: RelatedConfig = field(default_factory=RelatedConfig)
    run: RunConfig = field(default_factory=RunConfig)
    extra_categories: tuple[str, ...] = ()

    @property
    def schema(self) -> CategorySchema:
        return CategorySchema(self.extra_categories)

    def output_path(self, name: str) -> Path:
        return Path(self.paths.output_dir) / name


# (section, key) -> (parser, default-as-string)
def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split(",") if part.strip())


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(part.strip() for part in text.split(",") if part.strip())


def _optional_int(text: str):
    return None if not text.strip() else int(text)


_SCHEMA: dict[str, dict[str, tuple]] = {
    "paths": {
        "catalog": (str, "catalog.jsonl"),
        "annotations": (str, "annotations.jsonl"),
        "embeddings": (str, ""),
        "review_list": (str, ""),
        "rules": (str, ""),
        "prompt_template": (str, ""),
        "output_dir": (str, "out"),
    },
    "embed": {
        "d_base": (int, "256"),
        "hash_seed": (int, "0"),
    },
    "vocab": {
        "min_frequency": (int, "2"),
        "dedup_threshold": (float, "0.9"),
        "dedup_cross_category": (_bool, "false"),
    },
    "trainer": {
        "temperature": (float, "0.1"),
        "learning_rate": (float, "0.01"),
        "epochs": (int, "5"),
        "batch_size": (int, "64"),
        "symmetric_loss": (_bool, "true"),
        "momentum": (float, "0.0"),
        "dim": (_optional_int, ""),
    },
    "matcher": {
        "theta": (float, "0.5"),
        "weight_a": (float, "1.0"),
        "weight_b": (float, "0.01"),
        "weight_exponent": (float, "0.5"),
        "max_attributes_per_product": (_optional_int, ""),
        "threshold_on_raw": (_bool, "false"),
    },
    "querygen": {
        "min_support": (int, "20"),
        "min_score": (int, "4"),
    },
    "feedgen": {
        "min_products": (int, "20"),
        "min_relevance": (float, "0.0"),
        "require_all_attributes": (_bool, "true"),
    },
    "eval": {
        "recall_ks": (_int_list, "1,5,10"),
        "precision_k": (int, "10"),
    },
    "related": {
        "k": (int, "5"),
    },
    "run": {
        "seed": (int, "0"),
        "workers": (int, "1"),
    },
    "schema": {
        "extra_categories": (_str_list, ""),
    },
}


def default_config_text() -> str:
    lines = []
    for section, keys in _SCHEMA.items():
        lines.append(f"[{section}]")
        for key, (_, default) in keys.items():
            lines.append(f"{key} = {default}")
        lines.append("")
    return "\n".join(lines)


def _parse_values(parser: configparser.ConfigParser, path: str) -> dict[str, dict]:
    values: dict[str, dict] = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"{path}: unknown section [{section}]")
        values[section] = {}
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            convert = _SCHEMA[section][key][0]
            try:
                values[section][key] = convert(raw)
            except ValueError as exc:
                raise ConfigError(f"{path}: [{section}] {key} = {raw!r}: {exc}") from None
    return values


def load_config(path: str | Path) -> PipelineConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    read = parser.read(path, encoding="utf-8")
    if not read:
        raise ConfigError(f"config file not found: {path}")
    values = _parse_values(parser, str(path))

    def section(name: str) -> dict:
        defaults = {
            key: convert(default) for key, (convert, default) in _SCHEMA[name].items()
        }
        defaults.update(values.get(name, {}))
        return defaults

    try:
        paths = PathsConfig(**section("paths"))
        embed = EmbedConfig(**section("embed"))
        vocab = VocabConfig(
            min_frequency=section("vocab")["min_frequency"],
            dedup_threshold=section("vocab")["dedup_threshold"],
            review_list_path=paths.review_list or None,
            dedup_cross_category=section("vocab")["dedup_cross_category"],
        )
        trainer_vals = section("trainer")
        trainer = TrainerConfig(
            temperature=trainer_vals["temperature"],
            learning_rate=trainer_vals["learning_rate"],
            epochs=trainer_vals["epochs"],
            batch_size=trainer_vals["batch_size"],
            symmetric_loss=trainer_vals["symmetric_loss"],
            momentum=trainer_vals["momentum"],
            dim=trainer_vals["dim"],
        )
        matcher_vals = section("matcher")
        matcher = MatcherConfig(
            theta=matcher_vals["theta"],
            weights=WeightConfig(
                a=matcher_vals["weight_a"],
                b=matcher_vals["weight_b"],
                exponent=matcher_vals["weight_exponent"],
            ),
            max_attributes_per_product=matcher_vals["max_attributes_per_product"],
            threshold_on_raw=matcher_vals["threshold_on_raw"],
        )
        config = PipelineConfig(
            paths=paths,
            embed=embed,
            vocab=vocab,
            trainer=trainer,
            matcher=matcher,
            querygen=QuerygenConfig(**section("querygen")),
            feedgen=FeedConfig(**section("feedgen")),
            eval=EvalConfig(**section("eval")),
            related=RelatedConfig(**section("related")),
            run=RunConfig(**section("run")),
            extra_categories=section("schema")["extra_categories"],
        )
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config


def config_hash(config: PipelineConfig) -> str:
    """Stable digest of every configured value, for manifest provenance.

    The worker count is excluded: outputs are independent of it, so a
    workers-only change must still count as "unchanged".
    """
    canonical = dataclasses.replace(config, run=dataclasses.replace(config.run, workers=1))
    return hashlib.sha256(repr(canonical).encode("utf-8")).hexdigest()
