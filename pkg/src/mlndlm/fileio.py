"""File formats for counts, metadata, numeric tables and run manifests.

counts CSV
    Header ``category,<time_0>,<time_1>,...``; one row per category with its
    integer counts.
metadata CSV
    Header ``time_index,series_id,observed``; one row per column of the
    counts file, in the same order. Rows of a series must be contiguous.
    ``observed`` is ``1``/``0`` (``true``/``false`` also accepted).

Numeric output is written with 17 significant digits so that every value
round-trips exactly.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os

import numpy as np

from .model import CountDataset, ValidationError, Violation

FLOAT_FMT = "%.17g"


def sha256_bytes(b):
    return hashlib.sha256(b).hexdigest()


def sha256_file(path):
    with open(path, "rb") as fh:
        return sha256_bytes(fh.read())


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + "\n"


def write_text(path, text):
    with open(path, "w", newline="") as fh:
        fh.write(text)


def write_json(path, obj):
    write_text(path, canonical_json(obj))


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def _fmt(x):
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return FLOAT_FMT % x


def table_text(header, columns):
    """CSV text from a header and equal-length columns (ints stay integral)."""
    columns = [np.asarray(c) for c in columns]
    n = len(columns[0]) if columns else 0
    out = io.StringIO()
    out.write(",".join(header) + "\n")
    fmts = ["%d" if np.issubdtype(c.dtype, np.integer) else FLOAT_FMT for c in columns]
    if n:
        np.savetxt(out, np.column_stack([c.astype(object) for c in columns]),
                   fmt=fmts, delimiter=",")
    return out.getvalue()


def write_table(path, header, columns):
    write_text(path, table_text(header, columns))


def read_table(path):
    """Header and a dict of float columns."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = rows[0]
    body = np.array([[float(v) for v in r] for r in rows[1:]]).reshape(-1, len(header))
    return header, {h: body[:, i] for i, h in enumerate(header)}


def write_matrix(path, X, row_label="dim", col_labels=None):
    """2-D array with a header of column labels and a leading row index."""
    X = np.asarray(X, dtype=float)
    cols = [str(c) for c in (range(X.shape[1]) if col_labels is None else col_labels)]
    lines = [",".join([row_label] + cols)]
    for i, row in enumerate(X):
        lines.append(",".join([str(i)] + [FLOAT_FMT % v for v in row]))
    write_text(path, "\n".join(lines) + "\n")


def read_matrix(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(v) for v in r[1:]] for r in rows[1:]])


def read_counts(path):
    """Parse a counts CSV; returns ``(Y, categories, time_labels)``."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if len(rows) < 2:
        raise ValidationError([Violation("counts", f"{path}: need a header and at least one category row")])
    header = rows[0]
    times = header[1:]
    problems = []
    cats, Y = [], []
    for i, r in enumerate(rows[1:], start=2):
        if len(r) != len(header):
            problems.append(Violation("counts", f"line {i}: {len(r)} fields, header has {len(header)}"))
            continue
        try:
            vals = [int(v) for v in r[1:]]
        except ValueError:
            problems.append(Violation("counts", f"line {i}: non-integer count"))
            continue
        if any(v < 0 for v in vals):
            problems.append(Violation("counts", f"line {i}: negative count"))
        cats.append(r[0])
        Y.append(vals)
    if problems:
        raise ValidationError(problems)
    return np.array(Y, dtype=np.int64).reshape(len(cats), len(times)), cats, times


def _parse_bool(v):
    s = v.strip().lower()
    if s in ("1", "true", "yes"):
        return True
    if s in ("0", "false", "no"):
        return False
    raise ValueError(v)


def read_metadata(path, time_labels):
    """Parse a metadata CSV against the counts header; ``(observed, series_lengths, series_ids)``."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    problems = []
    need = {"time_index", "series_id", "observed"}
    if rows and not need <= set(rows[0]):
        raise ValidationError([Violation("metadata", f"columns must include {sorted(need)}")])
    if len(rows) != len(time_labels):
        problems.append(Violation("metadata", f"{len(rows)} rows for {len(time_labels)} count columns"))
    observed, ids = [], []
    for i, r in enumerate(rows):
        if i < len(time_labels) and r["time_index"] != time_labels[i]:
            problems.append(Violation("metadata", f"row {i + 2}: time_index {r['time_index']!r} "
                                                  f"does not match counts column {time_labels[i]!r}"))
        try:
            observed.append(_parse_bool(r["observed"]))
        except ValueError:
            problems.append(Violation("metadata", f"row {i + 2}: observed must be 0/1"))
        ids.append(r["series_id"])
    runs = []
    for s in ids:
        if runs and runs[-1][0] == s:
            runs[-1][1] += 1
        else:
            runs.append([s, 1])
    seen = [r[0] for r in runs]
    if len(set(seen)) != len(seen):
        problems.append(Violation("metadata", "rows of each series must be contiguous"))
    if problems:
        raise ValidationError(problems)
    return np.array(observed, dtype=bool), tuple(n for _, n in runs), seen


def load_dataset(counts_path, metadata_path=None):
    Y, cats, times = read_counts(counts_path)
    if metadata_path is None:
        return CountDataset(Y), {"categories": cats, "times": times, "series_ids": ["0"]}
    observed, lengths, ids = read_metadata(metadata_path, times)
    return (CountDataset(Y, observed, lengths),
            {"categories": cats, "times": times, "series_ids": ids})


def write_dataset(out_dir, data, categories=None, times=None, series_ids=None):
    """Write ``counts.csv`` and ``metadata.csv``; returns their paths."""
    D, T = data.Y.shape
    cats = [str(c) for c in (categories or range(D))]
    times = [str(t) for t in (times or range(T))]
    ids = [str(s) for s in (series_ids or range(data.K))]
    lines = [",".join(["category"] + times)]
    for c, row in zip(cats, data.Y):
        lines.append(",".join([c] + [str(int(v)) for v in row]))
    counts = os.path.join(out_dir, "counts.csv")
    write_text(counts, "\n".join(lines) + "\n")
    meta_lines = ["time_index,series_id,observed"]
    sid = np.repeat(np.arange(data.K), data.series_lengths)
    for t in range(T):
        meta_lines.append(f"{times[t]},{ids[sid[t]]},{int(data.observed[t])}")
    meta = os.path.join(out_dir, "metadata.csv")
    write_text(meta, "\n".join(meta_lines) + "\n")
    return counts, meta


def content_hash(path, drop_columns=()):
    """sha256 of a file; for CSVs, optionally ignoring named columns."""
    if not drop_columns:
        return sha256_file(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    keep = [i for i, h in enumerate(rows[0]) if h not in drop_columns]
    text = "\n".join(",".join(r[i] for i in keep) for r in rows)
    return sha256_bytes(text.encode())
