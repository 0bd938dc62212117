"""Small shared helpers: clocks, ids, tokenization, atomic JSON files."""
from __future__ import annotations

import json
import os
import re
import tempfile
import time
import uuid
from pathlib import Path

_TOKEN_SPLIT = re.compile(r"[^a-z0-9]+")


def now_ms() -> int:
    """Current wall time as integer milliseconds since the Unix epoch (UTC)."""
    return int(time.time() * 1000)


def new_id(prefix: str = "") -> str:
    h = uuid.uuid4().hex[:12]
    return f"{prefix}-{h}" if prefix else h


def tokens(text: str) -> list[str]:
    """Lowercase and split on non-alphanumeric runs; drops empty tokens."""
    return [t for t in _TOKEN_SPLIT.split(text.lower()) if t]


def write_json_atomic(path: str | Path, payload: object) -> None:
    """Write JSON via a temp file + rename so readers never see a torn file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=str(path.parent), prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            json.dump(payload, f, ensure_ascii=False, sort_keys=True)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_json(path: str | Path) -> object:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
