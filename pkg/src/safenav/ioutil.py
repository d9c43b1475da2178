"""Small file helpers: atomic writes and stable JSON output.

Every artifact the toolkit writes goes through the atomic helpers so an
interrupted run never leaves a truncated file behind.
"""

from __future__ import annotations

import json
import os
import tempfile


def atomic_write_text(path, text: str):
    """Write text to path via a temp file + rename in the same directory."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def write_json(path, obj, sort_keys: bool = True):
    """Stable JSON dump: sorted keys, repr floats, trailing newline."""
    atomic_write_text(path, json.dumps(obj, indent=1, sort_keys=sort_keys) + "\n")


def read_json(path):
    with open(path, "r") as f:
        return json.load(f)
