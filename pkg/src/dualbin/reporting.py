"""Structured run reports and seed derivation.

Reports are JSON with sorted keys so they diff cleanly. Wall-clock time
lives in a separate "meta" section; `canonical_bytes` excludes it, and
determinism guarantees apply to the canonical part.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from typing import Any

SCHEMA_VERSION = 1


def derive_seed(master_seed: int, label: str) -> int:
    """Counter-style seed expansion: independent streams per purpose."""
    digest = hashlib.sha256(f"{master_seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2**31)


@dataclass
class Report:
    command: str
    config: dict[str, Any]
    seed: int
    metrics: dict[str, Any] = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION
    wall_clock_s: float = 0.0

    def canonical_dict(self) -> dict[str, Any]:
        return {
            "schema_version": self.schema_version,
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "metrics": self.metrics,
        }

    def canonical_bytes(self) -> bytes:
        return json.dumps(
            self.canonical_dict(), sort_keys=True, indent=2, allow_nan=True
        ).encode()


def default_report_dir() -> str:
    return os.environ.get("DUALBIN_REPORT_DIR", ".")


def write_report(report: Report, path: str):
    doc = report.canonical_dict()
    doc["meta"] = {"wall_clock_s": report.wall_clock_s}
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True, indent=2)
        f.write("\n")


def read_report(path: str) -> Report:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(
            f"{path}: unsupported report schema version {doc.get('schema_version')}"
        )
    return Report(
        command=doc["command"],
        config=doc["config"],
        seed=doc["seed"],
        metrics=doc["metrics"],
        schema_version=doc["schema_version"],
        wall_clock_s=doc.get("meta", {}).get("wall_clock_s", 0.0),
    )


class Timer:
    def __enter__(self):
        self.t0 = time.monotonic()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.monotonic() - self.t0
        return False
