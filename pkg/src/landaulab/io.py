"""CSV and JSON helpers: strict parsing, round-trip number formatting, atomic writes."""

import csv
import json
import os
import tempfile

import numpy as np


class CsvError(ValueError):
    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.line = line


def format_number(x):
    """Shortest decimal string that parses back to the same float; strings pass through."""
    if isinstance(x, str):
        return x
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def read_points(path):
    """Read rows x,y,z[,w]; returns (points (n, 3), weights or None).

    A header row is skipped when its first field is not numeric. Every data
    row must have the same width, 3 or 4.
    """
    pts, wts, width = [], [], None
    with open(path, newline="") as fh:
        for line, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not f.strip() for f in row):
                continue
            try:
                vals = [float(f) for f in row]
            except ValueError:
                if line == 1:
                    continue
                raise CsvError(path, line, f"non-numeric field in {row!r}") from None
            if width is None:
                width = len(vals)
                if width not in (3, 4):
                    raise CsvError(path, line, f"expected 3 or 4 columns, got {width}")
            elif len(vals) != width:
                raise CsvError(path, line, f"expected {width} columns, got {len(vals)}")
            if not all(np.isfinite(vals)):
                raise CsvError(path, line, "non-finite value")
            pts.append(vals[:3])
            if width == 4:
                wts.append(vals[3])
    if not pts:
        raise CsvError(path, 0, "no data rows")
    return np.array(pts), (np.array(wts) if wts else None)


def _atomic_write(path, text):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path, header, rows):
    lines = [",".join(header)]
    lines += [",".join(format_number(v) for v in row) for row in rows]
    _atomic_write(path, "\n".join(lines) + "\n")


def write_points(path, points, weights=None):
    header = ["x", "y", "z"] + (["w"] if weights is not None else [])
    rows = points if weights is None else np.column_stack([points, weights])
    write_csv(path, header, rows)


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        # JSON has no inf/nan; encode as strings so reports stay valid JSON
        return x if np.isfinite(x) else repr(x)
    return obj


def write_json(path, obj):
    _atomic_write(path, json.dumps(to_jsonable(obj), indent=2, sort_keys=True) + "\n")
