"""CSV and JSON writers with deterministic number formatting."""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
from pydantic import BaseModel, TypeAdapter

logger = logging.getLogger(__name__)


def format_value(value: Any) -> str:
    """Shortest round-trip text for a CSV cell."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> int:
    """Write a CSV with a fixed header; returns the number of data rows."""
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            if len(row) != len(header):
                raise ValueError(f"{path.name}: row has {len(row)} cells, header has {len(header)}")
            writer.writerow([format_value(v) for v in row])
            count += 1
    logger.debug(f"wrote {count} rows to {path}")
    return count


def write_json(path: Path, payload: BaseModel | Sequence[BaseModel] | dict[str, Any]) -> None:
    """Serialize a report model (or list of models) as indented JSON."""
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(payload, BaseModel):
        text = payload.model_dump_json(indent=2)
    elif isinstance(payload, dict):
        text = json.dumps(payload, indent=2, sort_keys=False, allow_nan=True)
    else:
        adapter: TypeAdapter[Any] = TypeAdapter(list[type(payload[0])]) if payload else TypeAdapter(list)
        text = adapter.dump_json(list(payload), indent=2).decode("utf-8")
    path.write_text(text + "\n", encoding="utf-8")
    logger.debug(f"wrote {path}")
