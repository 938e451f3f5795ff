"""Run manifests: what a command ran with, on what inputs, producing what."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path


def file_sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def write_run_manifest(
    path: str | Path,
    command: list[str],
    config: dict,
    seed: int | None,
    inputs: list[str | Path],
    outputs: list[str | Path],
    wall_time_s: float,
) -> None:
    """Write the manifest atomically (temp file + rename)."""
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {str(p): file_sha256(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "wall_time_s": wall_time_s,
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)
