"""Matrix file formats.

``csv``: dense, comma separated. The first row is a header of column labels
when any cell after its first is non-numeric (for one-column files: when its
only cell is); the first column holds row labels when any of its data cells
is non-numeric. Numeric-looking labels are therefore read as data.

``coord``: sparse triplets. One header line ``rows cols nnz`` followed by
``nnz`` lines ``i j value`` with 1-based indices. Lines starting with ``%``
or ``#`` are comments.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .model import DataMatrix, Storage


class MatrixFormatError(ValueError):
    pass


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def _read_csv(path) -> DataMatrix:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise MatrixFormatError(f"{path}: empty matrix")
    col_labels = None
    head = rows[0][1:] if len(rows[0]) > 1 else rows[0]
    if not all(_is_number(c) for c in head):
        col_labels, rows = rows[0], rows[1:]
    if not rows:
        raise MatrixFormatError(f"{path}: empty matrix")
    row_labels = None
    if not all(_is_number(r[0]) for r in rows):
        row_labels = [r[0] for r in rows]
        rows = [r[1:] for r in rows]
        if col_labels is not None:
            col_labels = col_labels[1:]
    width = len(rows[0])
    for i, r in enumerate(rows):
        if len(r) != width:
            raise MatrixFormatError(f"{path}: ragged row {i + 1} has {len(r)} cells, expected {width}")
    if width == 0:
        raise MatrixFormatError(f"{path}: empty matrix")
    if col_labels is not None and len(col_labels) != width:
        raise MatrixFormatError(f"{path}: header has {len(col_labels)} labels for {width} columns")
    values = np.empty((len(rows), width))
    for i, r in enumerate(rows):
        for j, c in enumerate(r):
            try:
                x = float(c)
            except ValueError:
                raise MatrixFormatError(f"{path}: non-numeric cell {c!r} at row {i + 1}, column {j + 1}") from None
            if not math.isfinite(x):
                raise MatrixFormatError(f"{path}: non-finite value at row {i + 1}, column {j + 1}")
            if x < 0:
                raise MatrixFormatError(f"{path}: negative entry {x} at row {i + 1}, column {j + 1}")
            values[i, j] = x
    return DataMatrix(values, Storage.DENSE, row_labels, col_labels)


def _data_lines(path):
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if s and not s.startswith(("%", "#")):
                yield lineno, s.split()


def _read_coord(path) -> DataMatrix:
    lines = _data_lines(path)
    try:
        lineno, head = next(lines)
    except StopIteration:
        raise MatrixFormatError(f"{path}: empty matrix") from None
    try:
        n, m, nnz = (int(t) for t in head)
    except ValueError:
        raise MatrixFormatError(f"{path}:{lineno}: header must be 'rows cols nnz'") from None
    if n < 1 or m < 1:
        raise MatrixFormatError(f"{path}: empty matrix")
    ii, jj, vv = [], [], []
    for lineno, tok in lines:
        if len(tok) != 3:
            raise MatrixFormatError(f"{path}:{lineno}: expected 'i j value'")
        i, j, x = int(tok[0]), int(tok[1]), float(tok[2])
        if not (1 <= i <= n and 1 <= j <= m):
            raise MatrixFormatError(f"{path}:{lineno}: index ({i}, {j}) outside {n}x{m}")
        if not math.isfinite(x):
            raise MatrixFormatError(f"{path}:{lineno}: non-finite value at row {i}, column {j}")
        if x < 0:
            raise MatrixFormatError(f"{path}:{lineno}: negative entry {x} at row {i}, column {j}")
        ii.append(i - 1)
        jj.append(j - 1)
        vv.append(x)
    if len(vv) != nnz:
        raise MatrixFormatError(f"{path}: header announces {nnz} entries, found {len(vv)}")
    mat = sp.coo_matrix((vv, (ii, jj)), shape=(n, m)).tocsc()
    return DataMatrix(mat, Storage.SPARSE_COORDINATE)


def load_matrix(path, format: str = "csv") -> DataMatrix:
    if format == "csv":
        return _read_csv(path)
    if format == "coord":
        return _read_coord(path)
    raise ValueError(f"unknown matrix format {format!r}")


def default_labels(prefix: str, n: int) -> List[str]:
    return [f"{prefix}{i + 1}" for i in range(n)]


def write_matrix_csv(path, values, row_labels: Optional[Sequence[str]] = None,
                     col_labels: Optional[Sequence[str]] = None) -> Path:
    values = values.toarray() if sp.issparse(values) else np.asarray(values, dtype=float)
    n, m = values.shape
    row_labels = list(row_labels) if row_labels is not None else default_labels("r", n)
    col_labels = list(col_labels) if col_labels is not None else default_labels("c", m)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([""] + col_labels)
        for label, row in zip(row_labels, values):
            w.writerow([label] + [repr(float(x)) for x in row])
    return Path(path)


def write_coord(path, values) -> Path:
    mat = sp.coo_matrix(values)
    mat.sum_duplicates()
    keep = mat.data != 0
    with open(path, "w") as fh:
        fh.write(f"{mat.shape[0]} {mat.shape[1]} {int(keep.sum())}\n")
        for i, j, x in zip(mat.row[keep], mat.col[keep], mat.data[keep]):
            fh.write(f"{i + 1} {j + 1} {float(x)!r}\n")
    return Path(path)


def write_rows_csv(path, header: Sequence[str], rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(header))
        for r in rows:
            w.writerow([repr(x) if isinstance(x, float) else x for x in r])
    return Path(path)
