"""Per-round metrics rows and their CSV/JSON files."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

__all__ = ["MetricsRow", "COLUMNS", "CSV_VERSION", "write_csv", "write_json", "read_csv", "read_json"]

CSV_VERSION = "mpu-metrics/1"


@dataclass(frozen=True)
class MetricsRow:
    run_id: str
    mode: str
    round: int
    kappa: float
    m: int
    forget_ce: float
    retain_ce: float
    update_residual: float | None = None
    wall_ms: float = 0.0


COLUMNS = tuple(f.name for f in fields(MetricsRow))
_INT = {"round", "m"}
_STR = {"run_id", "mode"}


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _json_value(v):
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)
    return v


def write_csv(path, rows) -> None:
    buf = io.StringIO()
    buf.write(f"# {CSV_VERSION}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for row in rows:
        w.writerow([_cell(getattr(row, c)) for c in COLUMNS])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def write_json(path, rows) -> None:
    doc = {"version": CSV_VERSION, "columns": list(COLUMNS),
           "rows": [{k: _json_value(v) for k, v in asdict(r).items()} for r in rows]}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def _parse(name, text):
    if name in _STR:
        return text
    if name in _INT:
        return int(text)
    if text in ("", None):
        return None
    return float(text)


def read_csv(path) -> list[MetricsRow]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != f"# {CSV_VERSION}":
        raise ValueError(f"not a {CSV_VERSION} file")
    reader = csv.reader(lines[1:])
    header = next(reader)
    if tuple(header) != COLUMNS:
        raise ValueError(f"unexpected columns {header}")
    return [MetricsRow(**{c: _parse(c, v) for c, v in zip(header, rec)}) for rec in reader]


def read_json(path) -> list[MetricsRow]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("version") != CSV_VERSION:
        raise ValueError(f"not a {CSV_VERSION} document")
    out = []
    for rec in doc["rows"]:
        out.append(MetricsRow(**{c: (float(v) if isinstance(v, str) and c not in _STR else v)
                                 for c, v in rec.items()}))
    return out
