"""Atomic file writes and JSON-lines helpers shared by the exporters."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Iterable


def atomic_write_bytes(path: str | Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dumps_jsonl(header: dict | None, records: Iterable[dict]) -> str:
    lines = []
    if header is not None:
        lines.append(json.dumps({"header": header}, sort_keys=True, ensure_ascii=False))
    lines.extend(json.dumps(r, sort_keys=True, ensure_ascii=False) for r in records)
    return "\n".join(lines) + "\n"


def write_jsonl(path: str | Path, records: Iterable[dict], header: dict | None = None) -> None:
    atomic_write_text(path, dumps_jsonl(header, records))


def read_jsonl(path: str | Path) -> tuple[dict | None, list[dict]]:
    """Return ``(header, records)``; the header is the optional first line."""
    header = None
    records = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            if "header" in obj and header is None and not records:
                header = obj["header"]
            else:
                records.append(obj)
    return header, records


def sig(x: float, digits: int = 9) -> float:
    """Round to ``digits`` significant digits."""
    return float(f"{x:.{digits}g}")
