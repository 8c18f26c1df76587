"""Run manifest: per-stage provenance with file digests and row counts.

The manifest is written atomically after every stage.  Digests let a rerun
detect that nothing changed (and no-op), and let downstream stages verify
their upstream artifacts; timestamps are provenance only.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

from .errors import KlpError
from .jsonl import write_text_atomic

MANIFEST_NAME = "manifest.json"


class MissingUpstreamError(KlpError):
    """A stage's upstream outputs are missing or stale."""


def file_digest(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass
class StageRecord:
    version: str
    config_hash: str
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    row_counts: dict[str, int] = field(default_factory=dict)
    started_at: str = ""
    finished_at: str = ""


@dataclass
class RunManifest:
    stages: dict[str, StageRecord] = field(default_factory=dict)

    def record(self, stage: str) -> StageRecord | None:
        return self.stages.get(stage)


def manifest_path(output_dir: str | Path) -> Path:
    return Path(output_dir) / MANIFEST_NAME


def load_manifest(output_dir: str | Path) -> RunManifest:
    path = manifest_path(output_dir)
    if not path.exists():
        return RunManifest()
    raw = json.loads(path.read_text(encoding="utf-8"))
    stages = {
        name: StageRecord(**record) for name, record in raw.get("stages", {}).items()
    }
    return RunManifest(stages)


def save_manifest(manifest: RunManifest, output_dir: str | Path) -> None:
    payload = {
        "stages": {
            name: {
                "version": r.version,
                "config_hash": r.config_hash,
                "inputs": r.inputs,
                "outputs": r.outputs,
                "row_counts": r.row_counts,
                "started_at": r.started_at,
                "finished_at": r.finished_at,
            }
            for name, r in manifest.stages.items()
        }
    }
    write_text_atomic(manifest_path(output_dir), json.dumps(payload, indent=2) + "\n")


def now_iso() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")
