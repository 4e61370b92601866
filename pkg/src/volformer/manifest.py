"""Run manifests: every command records its effective configuration, input
hashes, seeds and outputs beside its results, so any run can be audited and
replayed. Wall-clock fields are the only non-reproducible entries."""

from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path

from . import __version__


def file_sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode()).hexdigest()


def write_manifest(out_dir, command, config, inputs, outputs, seeds, extra=None):
    """Write manifest_<command>.json into out_dir and return its path.

    ``inputs`` may contain paths (hashed) or (name, path) pairs.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    input_hashes = {}
    for item in inputs:
        name, path = item if isinstance(item, tuple) else (str(item), item)
        input_hashes[str(name)] = file_sha256(path) if Path(path).is_file() else None
    payload = {
        "command": command,
        "version": __version__,
        "config": config,
        "config_hash": config_hash(config),
        "inputs": input_hashes,
        "outputs": sorted(str(o) for o in outputs),
        "seeds": seeds,
        "wall_clock": {"written_at_unix": time.time()},
    }
    path = out_dir / f"manifest_{command}.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return path


def read_manifest(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
