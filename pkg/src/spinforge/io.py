"""CSV/JSON/YAML serialization with atomic writes.

CSV files carry '#'-prefixed header lines (tool version, config hash, units,
free-form metadata) followed by one column-name line and the data rows.
No timestamps are written, so identical inputs give identical bytes.
"""

from __future__ import annotations

import hashlib
import io as _io
import json
import os
import tempfile

import numpy as np
import yaml

from . import __version__


class SchemaError(ValueError):
    """Input data does not match the expected column layout."""


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def atomic_write(path, data: str | bytes):
    """Write to a temporary file next to ``path`` then rename over it."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=d)
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v):
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".12g")


def render_csv(columns, rows, units=None, config=None, meta=None) -> str:
    """CSV text for ``rows`` (iterable of sequences) under ``columns``."""
    buf = _io.StringIO()
    buf.write(f"# spinforge {__version__}\n")
    if config is not None:
        buf.write(f"# config_hash: {config_hash(config)}\n")
    if units:
        buf.write("# units: " + ", ".join(f"{c}={units[c]}" for c in columns if c in units) + "\n")
    for k, v in (meta or {}).items():
        buf.write(f"# {k}: {v}\n")
    buf.write(",".join(columns) + "\n")
    for r in rows:
        buf.write(",".join(_fmt(v) for v in r) + "\n")
    return buf.getvalue()


def write_csv(path, columns, rows, units=None, config=None, meta=None):
    text = render_csv(columns, rows, units, config, meta)
    if path is None or path == "-":
        return text
    atomic_write(path, text)
    return text


def read_csv(path, required=None):
    """Read a '#'-commented CSV into a dict of float arrays.

    Raises :class:`SchemaError` when a required column is missing, a row has
    the wrong width, or a cell is not a number.
    """
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise SchemaError(f"{path}: no data")
    header = [c.strip() for c in lines[0].split(",")]
    rows = []
    for n, ln in enumerate(lines[1:], start=2):
        cells = ln.split(",")
        if len(cells) != len(header):
            raise SchemaError(f"{path}: row {n} has {len(cells)} fields, expected {len(header)}")
        try:
            rows.append([float(c) for c in cells])
        except ValueError:
            raise SchemaError(f"{path}: row {n} is not numeric: {ln!r}") from None
    if not rows:
        raise SchemaError(f"{path}: header but no rows")
    data = np.array(rows, dtype=float)
    out = {c: data[:, k] for k, c in enumerate(header)}
    missing = [c for c in (required or ()) if c not in out]
    if missing:
        raise SchemaError(f"{path}: missing column(s) {missing}; found {header}")
    return out


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def load_yaml(path):
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise SchemaError(f"{path}: expected a mapping at top level")
    return data
