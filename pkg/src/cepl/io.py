"""Serialization: 17-digit floats, JSON, CSV and JSON-lines with an embedded config hash."""

import csv
import io
import json
import math
import os

import numpy as np


def fmt(x):
    """Decimal text for a number; floats use 17 significant digits."""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if x is None:
        return ""
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format(x, ".17g")


def _json(obj, out, sort_keys):
    if obj is None:
        out.append("null")
    elif isinstance(obj, (bool, np.bool_)):
        out.append("true" if obj else "false")
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        v = float(obj)
        out.append(format(v, ".17g") if math.isfinite(v) else json.dumps(fmt(v)))
    elif isinstance(obj, str):
        out.append(json.dumps(obj))
    elif isinstance(obj, dict):
        keys = sorted(obj) if sort_keys else list(obj)
        out.append("{")
        for i, k in enumerate(keys):
            if i:
                out.append(", ")
            out.append(json.dumps(str(k)) + ": ")
            _json(obj[k], out, sort_keys)
        out.append("}")
    elif isinstance(obj, (list, tuple, np.ndarray)):
        out.append("[")
        for i, v in enumerate(obj):
            if i:
                out.append(", ")
            _json(v, out, sort_keys)
        out.append("]")
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj, sort_keys=False):
    """JSON text with 17-significant-digit floats; non-finite floats become strings."""
    out = []
    _json(obj, out, sort_keys)
    return "".join(out)


def _num(v):
    if isinstance(v, str) and v in ("nan", "inf", "-inf"):
        return float(v)
    return v


def loads(text):
    obj = json.loads(text)
    return _denan(obj)


def _denan(obj):
    if isinstance(obj, dict):
        return {k: _denan(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_denan(v) for v in obj]
    return _num(obj)


def write_json(path, obj, config_hash=None):
    if config_hash is not None:
        obj = {"config_hash": config_hash, **obj}
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(dumps(obj))
        f.write("\n")
    return path


def read_json(path):
    with open(path, encoding="utf-8") as f:
        return loads(f.read())


def write_csv(path, header, rows, config_hash):
    """CSV with a leading ``# config_hash=...`` line."""
    buf = io.StringIO()
    buf.write(f"# config_hash={config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([v if isinstance(v, str) else fmt(v) for v in r])
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(buf.getvalue())
    return path


def read_csv(path):
    """(config_hash, rows as dicts of strings)."""
    with open(path, encoding="utf-8") as f:
        first = f.readline().strip()
        h = first.split("=", 1)[1] if first.startswith("# config_hash=") else None
        if h is None:
            f.seek(0)
        rows = list(csv.DictReader(f))
    return h, rows


def write_jsonl(path, records, config_hash):
    """One JSON object per line, each carrying the config hash."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for r in records:
            f.write(dumps({"config_hash": config_hash, **r}))
            f.write("\n")
    return path


def read_jsonl(path):
    with open(path, encoding="utf-8") as f:
        return [loads(line) for line in f if line.strip()]


def embedded_hash(path):
    """Config hash stored in an output file (CSV, JSON or JSON-lines)."""
    p = os.fspath(path)
    if p.endswith(".csv"):
        return read_csv(p)[0]
    with open(p, encoding="utf-8") as f:
        line = f.readline()
    if p.endswith(".jsonl"):
        return loads(line).get("config_hash")
    return read_json(p).get("config_hash")
