"""Run manifests: hash-addressed stage caching and staleness detection.

Every pipeline stage writes a run_manifest.json recording its config
snapshot, the hashes of its input artifacts, and a hash over its own
outputs. Re-running a stage whose key (config + input hashes) is unchanged
is a no-op; consuming an artifact whose bytes no longer match its
producer's manifest raises a stale-artifact error.
"""

from __future__ import annotations

import hashlib
import json
import shutil
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Optional

from . import __version__

MANIFEST_SCHEMA_VERSION = 1
MANIFEST_NAME = "run_manifest.json"


class MissingArtifactError(RuntimeError):
    pass


class StaleArtifactError(RuntimeError):
    pass


def hash_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_tree(path: Path) -> str:
    """Content hash of a file, or of a directory's files (manifest excluded)."""
    path = Path(path)
    if path.is_file():
        return hash_file(path)
    h = hashlib.sha256()
    files = sorted(p for p in path.rglob("*")
                   if p.is_file() and p.name != MANIFEST_NAME)
    for p in files:
        h.update(p.relative_to(path).as_posix().encode())
        h.update(bytes.fromhex(hash_file(p)))
    return h.hexdigest()


def stage_key(config_snapshot: dict, input_hashes: dict[str, str]) -> str:
    payload = json.dumps({"config": config_snapshot, "inputs": input_hashes},
                         sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def load_manifest(stage_dir: Path) -> Optional[dict]:
    path = Path(stage_dir) / MANIFEST_NAME
    if not path.exists():
        return None
    return json.loads(path.read_text())


def _check_inputs(inputs: dict[str, Path], producers: dict[str, str],
                  ) -> dict[str, str]:
    """Hash each input and verify it still matches its producer's manifest."""
    hashes = {}
    for name, path in inputs.items():
        path = Path(path)
        if not path.exists():
            producer = producers.get(name)
            hint = f"; run `pairaug {producer}` first" if producer else ""
            raise MissingArtifactError(f"missing {name} artifact at {path}{hint}")
        current = hash_tree(path)
        manifest = load_manifest(path) if path.is_dir() else None
        if manifest is not None and manifest.get("output_hash") != current:
            raise StaleArtifactError(
                f"{name} artifact at {path} no longer matches its manifest; "
                f"re-run `pairaug {producers.get(name, manifest['stage'])}`")
        hashes[name] = current
    return hashes


def run_stage(stage: str, out_dir: Path, config_snapshot: dict,
              inputs: dict[str, Path], producers: dict[str, str],
              builder: Callable[[], Optional[dict]],
              force: bool = False) -> tuple[dict, bool]:
    """Run builder unless an up-to-date manifest short-circuits it.

    Returns (manifest, skipped). The builder writes all outputs into
    out_dir and may return a summary dict stored in the manifest.
    """
    out_dir = Path(out_dir)
    input_hashes = _check_inputs(inputs, producers)
    key = stage_key(config_snapshot, input_hashes)

    existing = load_manifest(out_dir)
    if existing is not None and not force:
        if (existing.get("key") == key
                and existing.get("output_hash") == hash_tree(out_dir)):
            return existing, True

    if existing is not None and out_dir.exists():
        # Completed stage with a different key (or forced): clear it so a
        # stale resume checkpoint cannot leak into the rebuild.
        shutil.rmtree(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    started = datetime.now(timezone.utc).isoformat()
    summary = builder() or {}
    finished = datetime.now(timezone.utc).isoformat()

    manifest = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "stage": stage,
        "key": key,
        "inputs": {name: {"path": str(Path(p)), "sha256": input_hashes[name]}
                   for name, p in inputs.items()},
        "outputs": sorted(
            p.relative_to(out_dir).as_posix() for p in out_dir.rglob("*")
            if p.is_file() and p.name != MANIFEST_NAME),
        "output_hash": hash_tree(out_dir),
        "config": config_snapshot,
        "summary": summary,
        "started": started,
        "finished": finished,
        "version": f"pairaug {__version__}",
    }
    (out_dir / MANIFEST_NAME).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest, False
