"""CSV ingestion and machine-readable report emission."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DomainError, ParseError, SchemaError
from .nuisance import Dataset

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ColumnMap:
    y: str = "y"
    d: str = "d"
    z: str = "z"
    x: tuple[str, ...] = ("x1", "x2", "x3")
    theta: str | None = None


def load_csv(path, mapping: ColumnMap) -> tuple[Dataset, np.ndarray | None]:
    """Read a UTF-8 CSV with header into a Dataset.

    The outcome cell may be empty only on rows with d = 0 (truncated
    outcomes); d and z must be exactly 0 or 1.  Errors carry the offending
    row (1-based, excluding the header) and column.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    reader = csv.DictReader(text.splitlines())
    if reader.fieldnames is None:
        raise SchemaError(f"{path}: empty file")
    needed = [mapping.y, mapping.d, mapping.z, *mapping.x]
    if mapping.theta:
        needed.append(mapping.theta)
    missing = [c for c in needed if c not in reader.fieldnames]
    if missing:
        raise SchemaError(f"{path}: missing columns {missing}")

    ys, ds_, zs, xs, thetas = [], [], [], [], []
    for i, rec in enumerate(reader, start=1):
        def cell(col, *, allow_empty=False):
            raw = (rec.get(col) or "").strip()
            if raw == "":
                if allow_empty:
                    return math.nan
                raise ParseError(f"{path}: row {i}, column {col!r} is empty")
            try:
                return float(raw)
            except ValueError as exc:
                raise ParseError(
                    f"{path}: row {i}, column {col!r}: not numeric ({raw!r})"
                ) from exc

        d = cell(mapping.d)
        z = cell(mapping.z)
        for name, v in ((mapping.d, d), (mapping.z, z)):
            if v not in (0.0, 1.0):
                raise DomainError(f"{path}: row {i}, column {name!r} must be 0/1, got {v:g}")
        y = cell(mapping.y, allow_empty=True)
        if math.isnan(y) and d == 1.0:
            raise DomainError(
                f"{path}: row {i}: empty outcome on a row with {mapping.d}=1")
        ys.append(y)
        ds_.append(int(d))
        zs.append(int(z))
        xs.append([cell(c) for c in mapping.x])
        if mapping.theta:
            thetas.append(cell(mapping.theta))
    if not ys:
        raise SchemaError(f"{path}: no data rows")
    dataset = Dataset(y=np.array(ys), d=np.array(ds_), z=np.array(zs),
                      x=np.array(xs))
    theta_col = np.array(thetas) if mapping.theta else None
    return dataset, theta_col


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def _jsonify(v):
    if isinstance(v, (np.floating, np.integer)):
        v = v.item()
    if isinstance(v, float) and not math.isfinite(v):
        return None if math.isnan(v) else ("inf" if v > 0 else "-inf")
    return v


@dataclass
class ReportFile:
    """Rows plus self-describing metadata.

    The report body (rows, config hash, schema version) is deterministic for
    a fixed config and seed; the creation timestamp lives outside the
    hash-covered region.
    """

    command: str
    config: dict
    rows: list[dict] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def semantic_config(self) -> dict:
        # the output location does not affect the rows, so it stays outside
        # the hash-covered region
        return {k: v for k, v in self.config.items() if k != "output"}

    def config_hash(self) -> str:
        blob = json.dumps(self.semantic_config(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def body(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "command": self.command,
            "config_hash": self.config_hash(),
            "config": self.semantic_config(),
            "notes": self.notes,
            "rows": [{k: _jsonify(v) for k, v in r.items()} for r in self.rows],
        }

    def body_bytes(self) -> bytes:
        return json.dumps(self.body(), sort_keys=True, default=str).encode()

    def to_json(self) -> str:
        doc = {
            "metadata": {
                "version": __version__,
                "created_at": datetime.now(timezone.utc).isoformat(),
                "body_sha256": hashlib.sha256(self.body_bytes()).hexdigest(),
            },
            "body": self.body(),
        }
        return json.dumps(doc, indent=2, sort_keys=True, default=str)

    def to_csv(self) -> str:
        if not self.rows:
            return ""
        cols: list[str] = []
        for r in self.rows:
            for c in r:
                if c not in cols:
                    cols.append(c)
        out = [",".join(cols)]
        for r in self.rows:
            cells = []
            for c in cols:
                v = _jsonify(r.get(c))
                if v is None:
                    cells.append("")
                elif isinstance(v, float):
                    cells.append(repr(v))
                else:
                    cells.append(str(v))
            out.append(",".join(cells))
        return "\n".join(out) + "\n"

    def write(self, output: str | Path) -> list[Path]:
        """Write CSV and/or JSON depending on the extension; both when the
        path has no extension."""
        output = Path(output)
        written = []
        suffix = output.suffix.lower()
        if suffix in ("", ".csv"):
            p = output if suffix else output.with_suffix(".csv")
            p.parent.mkdir(parents=True, exist_ok=True)
            p.write_text(self.to_csv())
            written.append(p)
        if suffix in ("", ".json"):
            p = output if suffix else output.with_suffix(".json")
            p.parent.mkdir(parents=True, exist_ok=True)
            p.write_text(self.to_json())
            written.append(p)
        if not written:
            raise DomainError(f"unsupported output extension {suffix!r}")
        return written
