"""Run manifests: a config snapshot plus content hashes of every artifact.

The manifest is the one place wall-clock timestamps are allowed; all other
outputs are byte-reproducible from (config, seed), and the manifest pins
their hashes so a run can be audited or its inputs re-verified later.
"""

from __future__ import annotations

import hashlib
import json
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable

MANIFEST_NAME = "manifest.json"


class ManifestError(RuntimeError):
    """An artifact referenced by a manifest is missing or hash-diverged."""


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: str | Path, *, kind: str, seed: int, config: dict,
                   artifacts: Iterable[str | Path], extra: dict | None = None) -> Path:
    """Hash the given artifact files (paths relative to or under out_dir)."""
    out = Path(out_dir)
    entries = {}
    for art in artifacts:
        p = Path(art)
        if not p.is_absolute():
            p = out / p
        rel = p.relative_to(out).as_posix() if p.is_relative_to(out) else str(p)
        entries[rel] = {"sha256": sha256_file(p), "bytes": p.stat().st_size}
    doc = {
        "kind": kind,
        "seed": seed,
        "config": config,
        "artifacts": entries,
        "created_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        **(extra or {}),
    }
    path = out / MANIFEST_NAME
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def read_manifest(path: str | Path) -> dict:
    p = Path(path)
    if p.is_dir():
        p = p / MANIFEST_NAME
    return json.loads(p.read_text())


def verify_manifest(path: str | Path) -> list[str]:
    """Return a problem description per missing or diverged artifact."""
    p = Path(path)
    if p.is_dir():
        p = p / MANIFEST_NAME
    doc = json.loads(p.read_text())
    base = p.parent
    problems = []
    for rel, info in doc.get("artifacts", {}).items():
        target = base / rel
        if not target.exists():
            problems.append(f"missing artifact: {rel}")
        elif sha256_file(target) != info["sha256"]:
            problems.append(f"hash mismatch: {rel}")
    return problems
