"""Small shared helpers: atomic file writes, hashing, canonical JSON."""
from __future__ import annotations

import hashlib
import json
import os
import tempfile


def atomic_write_bytes(path, data: bytes):
    """Write to a temp file in the target directory, then rename into place."""
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def canonical_json(obj) -> str:
    """Stable JSON encoding: sorted keys, fixed separators, newline-terminated."""
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def worker_count(requested=None) -> int:
    """Resolve the worker cap from DRAPE_THREADS; defaults to serial."""
    if requested is not None:
        return max(1, int(requested))
    env = os.environ.get("DRAPE_THREADS", "").strip()
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f"DRAPE_THREADS must be an integer, got {env!r}")
    return 1
