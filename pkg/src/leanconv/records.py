"""Result records and the small CSV/JSON helpers the CLI uses."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import platform
from dataclasses import asdict, dataclass, field
from pathlib import Path

SCHEMA_VERSION = 1


def config_hash(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def machine_descriptor() -> dict:
    import numpy as np

    return {
        "platform": platform.platform(),
        "machine": platform.machine(),
        "processor": platform.processor(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "cpu_count": os.cpu_count(),
    }


@dataclass
class ResultRecord:
    command: str
    config: dict
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    wall_clock_s: float = 0.0
    machine: dict = field(default_factory=machine_descriptor)
    schema_version: int = SCHEMA_VERSION

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["config_hash"] = self.config_hash
        return doc

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, default=_jsonable))
        return path

    @classmethod
    def read(cls, path) -> "ResultRecord":
        doc = json.loads(Path(path).read_text())
        if doc.get("schema_version", 0) > SCHEMA_VERSION:
            raise ValueError(f"record schema {doc['schema_version']} is newer than {SCHEMA_VERSION}")
        doc.pop("config_hash", None)
        return cls(**doc)


def _jsonable(obj):
    try:
        return obj.item()
    except AttributeError:
        return str(obj)


def rows_to_csv(rows: list, columns=None) -> str:
    if not rows:
        return ",".join(columns or []) + "\n"
    columns = columns or list(rows[0])
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def rows_to_text(rows: list, columns=None) -> str:
    """Right-aligned plain-text table."""
    if not rows:
        return ""
    columns = columns or list(rows[0])
    cells = [[str(c) for c in columns]] + [[_fmt(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    lines = ["  ".join(cell.rjust(w) for cell, w in zip(row, widths)) for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)
