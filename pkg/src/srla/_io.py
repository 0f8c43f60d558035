"""Versioned JSON documents shared by every persisted artifact."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import numpy as np

from .errors import SchemaError, UnsupportedVersion


def _default(obj: Any) -> Any:
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, (set, frozenset)):
        return sorted(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(schema: str, version: int, payload: dict[str, Any]) -> str:
    doc = {"schema": schema, "version": version, **payload}
    # json writes floats with repr(), so values round-trip exactly
    return json.dumps(doc, default=_default, indent=1, sort_keys=False) + "\n"


def write_document(path: str | Path, schema: str, version: int, payload: dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(schema, version, payload))
    return path


def loads(text: str, schema: str, version: int) -> dict[str, Any]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"malformed {schema} document: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("schema") != schema:
        raise SchemaError(f"expected a {schema!r} document, got {doc.get('schema') if isinstance(doc, dict) else type(doc).__name__!r}")
    found = doc.get("version")
    if found != version:
        raise UnsupportedVersion(f"{schema} version {found!r} is not supported (expected {version})")
    return doc


def read_document(path: str | Path, schema: str, version: int) -> dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    return loads(path.read_text(), schema, version)
