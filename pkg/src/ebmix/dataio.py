"""Reading expression tables and writing reports.

Expression tables are delimited text with a header row of sample names and
gene ids in the first column. Group membership comes from an explicit label
list, a two-column ``sample,group`` mapping file, or header cells written as
``group:sample``.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from collections.abc import Mapping, Sequence
from pathlib import Path

import numpy as np

from .core import DataValidationError, ExpressionMatrix

CSV_DIGITS = 10


def _delimiter(path: Path, fmt: str | None) -> str:
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    if fmt == "csv":
        return ","
    if fmt in ("tsv", "txt", "tab"):
        return "\t"
    raise DataValidationError(f"cannot tell the format of {path.name!r}; use csv or tsv")


def read_group_file(path) -> dict:
    """Two-column ``sample, group`` mapping (comma or tab separated, optional header)."""
    path = Path(path)
    text = path.read_text()
    delim = "\t" if "\t" in text.splitlines()[0] else ","
    mapping = {}
    for lineno, row in enumerate(csv.reader(text.splitlines(), delimiter=delim), start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 2:
            raise DataValidationError(f"{path.name}, line {lineno}: expected 2 columns, got {len(row)}")
        sample, group = row[0].strip(), row[1].strip()
        if lineno == 1 and sample.lower() == "sample" and group.lower() == "group":
            continue
        if sample in mapping:
            raise DataValidationError(f"{path.name}, line {lineno}: sample {sample!r} listed twice")
        mapping[sample] = group
    return mapping


def _dedupe(ids: list[str]) -> tuple:
    seen: dict[str, int] = {}
    out = []
    dupes = []
    for gid in ids:
        count = seen.get(gid, 0) + 1
        seen[gid] = count
        if count > 1:
            dupes.append(gid)
            out.append(f"{gid}_{count}")
        else:
            out.append(gid)
    if dupes:
        warnings.warn(f"{len(dupes)} duplicate gene id(s) renamed with an occurrence suffix, "
                      f"first: {dupes[0]!r}", stacklevel=3)
    return tuple(out)


def ingest(path, fmt: str | None = None, groups: Sequence[str] | Mapping | None = None,
           *, one_group: str | None = None) -> ExpressionMatrix:
    """Read a gene x sample table into an :class:`ExpressionMatrix`.

    Parameters
    ----------
    path : path-like
        Delimited text file; the format follows the extension unless ``fmt``
        (``"csv"`` or ``"tsv"``) is given.
    groups : sequence or mapping, optional
        One group label per sample column, or a ``sample -> group`` mapping.
        When omitted every header cell must read ``group:sample``.
    one_group : str, optional
        Put every sample in this group (for paired differences); header
        cells are then taken as plain sample names.
    """
    path = Path(path)
    delim = _delimiter(path, fmt)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh, delimiter=delim))
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if len(rows) < 2:
        raise DataValidationError(f"{path.name}: need a header row and at least one gene")
    header = [c.strip() for c in rows[0]]
    samples = header[1:]
    if not samples:
        raise DataValidationError(f"{path.name}: header has no sample columns")
    if one_group is not None:
        labels = [one_group] * len(samples)
    elif groups is None:
        split = [s.split(":", 1) for s in samples]
        bad = [j for j, parts in enumerate(split) if len(parts) != 2 or not all(parts)]
        if bad:
            raise DataValidationError(
                f"{path.name}: no group map given and header column {bad[0] + 2} "
                f"({samples[bad[0]]!r}) is not of the form group:sample")
        labels = [parts[0] for parts in split]
    elif isinstance(groups, Mapping):
        missing = [(j, s) for j, s in enumerate(samples) if s not in groups]
        if missing:
            j, s = missing[0]
            raise DataValidationError(
                f"{path.name}: sample {s!r} (column {j + 2}) has no group "
                f"({len(missing)} unmapped in total)")
        labels = [groups[s] for s in samples]
    else:
        labels = [str(g) for g in groups]
        if len(labels) != len(samples):
            raise DataValidationError(
                f"{path.name}: {len(labels)} group labels for {len(samples)} samples")
    values = np.empty((len(rows) - 1, len(samples)))
    ids = []
    for i, row in enumerate(rows[1:]):
        lineno = i + 2
        if len(row) != len(header):
            raise DataValidationError(
                f"{path.name}, line {lineno}: {len(row)} fields, header has {len(header)}")
        gid = row[0].strip()
        if not gid:
            raise DataValidationError(f"{path.name}, line {lineno}: empty gene id")
        ids.append(gid)
        for j, cell in enumerate(row[1:]):
            try:
                v = float(cell)
            except ValueError:
                raise DataValidationError(
                    f"{path.name}, line {lineno}, column {j + 2}: non-numeric value {cell!r} "
                    f"(gene {gid!r}, sample {samples[j]!r})") from None
            if not math.isfinite(v):
                raise DataValidationError(
                    f"{path.name}, line {lineno}, column {j + 2}: non-finite value {cell!r} "
                    f"(gene {gid!r}, sample {samples[j]!r})")
            values[i, j] = v
    return ExpressionMatrix(values, tuple(labels), _dedupe(ids))


def write_matrix(path, data: ExpressionMatrix, fmt: str | None = None) -> None:
    """Write a matrix that :func:`ingest` reads back bit for bit.

    Values use the shortest round-trip representation; header cells carry
    the group as ``group:sample``.
    """
    path = Path(path)
    delim = _delimiter(path, fmt)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, delimiter=delim, lineterminator="\n")
        w.writerow(["gene"] + [f"{g}:s{j + 1}" for j, g in enumerate(data.group_of_sample)])
        for gid, row in zip(data.gene_ids, data.values):
            w.writerow([gid] + [repr(float(v)) for v in row])


def fmt_number(value) -> str:
    """Fixed-width-free numeric text with ``CSV_DIGITS`` significant digits."""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    v = float(value)
    if math.isnan(v):
        return "NA"
    if math.isinf(v):
        return "Inf" if v > 0 else "-Inf"
    return f"{v:.{CSV_DIGITS}g}"


def write_table(path, columns: Mapping[str, Sequence]) -> None:
    """Write equal-length columns as CSV, numbers at ``CSV_DIGITS`` digits."""
    names = list(columns)
    lengths = {len(columns[n]) for n in names}
    if len(lengths) > 1:
        raise ValueError("columns differ in length")
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in zip(*(columns[n] for n in names)):
            w.writerow([c if isinstance(c, str) else fmt_number(c) for c in row])


def write_records(path, records: Sequence[Mapping], fields: Sequence[str]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for rec in records:
            w.writerow([rec[f] if isinstance(rec[f], str) else fmt_number(rec[f]) for f in fields])


def read_table(path) -> dict[str, list[str]]:
    """Columns of a CSV written by :func:`write_table`, as strings."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataValidationError(f"{Path(path).name} is empty")
    header = rows[0]
    cols = {h: [] for h in header}
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DataValidationError(f"{Path(path).name}, line {lineno}: ragged row")
        for h, c in zip(header, row):
            cols[h].append(c)
    return cols


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def write_json(path, payload) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True, default=_json_default, allow_nan=True)
    Path(path).write_text(text + "\n")
