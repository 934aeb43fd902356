"""Deterministic CSV/JSON emitters for report records.

JSON layout::

    {"columns": [name, ...], "records": [{name: value, ...}, ...]}

Floats are rounded to 4 decimals in both formats; missing values are
empty CSV cells and JSON ``null``.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
from pathlib import Path
from typing import IO, Iterable, Sequence

from .errors import BnnError

FORMATS = ("csv", "json")


def _as_dict(rec) -> dict:
    if dataclasses.is_dataclass(rec) and not isinstance(rec, type):
        return dataclasses.asdict(rec)
    if isinstance(rec, dict):
        return rec
    raise BnnError(f"cannot emit record of type {type(rec).__name__}")


def _csv_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def _json_value(v):
    if isinstance(v, float):
        return float(f"{v:.4f}")
    if hasattr(v, "item"):  # numpy scalar
        return _json_value(v.item())
    return v


def render(records: Iterable, fmt: str = "csv", columns: Sequence[str] | None = None) -> str:
    rows = [_as_dict(r) for r in records]
    if columns is None:
        columns = list(rows[0]) if rows else []
    columns = list(columns)
    for i, row in enumerate(rows):
        if set(row) != set(columns):
            raise BnnError(f"record {i} has columns {sorted(row)}, expected {sorted(columns)}")
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        if columns:
            writer.writerow(columns)
        for row in rows:
            writer.writerow([_csv_cell(row[c]) for c in columns])
        return buf.getvalue()
    if fmt == "json":
        doc = {"columns": columns, "records": [{c: _json_value(row[c]) for c in columns} for row in rows]}
        return json.dumps(doc, indent=2) + "\n"
    raise BnnError(f"unknown report format {fmt!r}; choose csv or json")


def emit_report(records: Iterable, fmt: str = "csv", sink: str | Path | IO[str] | None = None,
                columns: Sequence[str] | None = None) -> str:
    """Render records and write them to ``sink`` (path or text stream). Returns the text."""
    text = render(records, fmt, columns)
    if sink is None:
        return text
    if isinstance(sink, (str, Path)):
        Path(sink).write_text(text)
    else:
        sink.write(text)
    return text
