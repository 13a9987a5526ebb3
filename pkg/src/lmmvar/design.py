"""Tabular ingestion and construction of the numeric model objects.

A :class:`ModelFrame` holds the response ``y``, the fixed design ``X``
(without the intercept column, which is always implied) and the random-effect
design blocks ``Z_1..Z_r``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import linalg

from .formula import FormulaAst

__all__ = [
    "DataError",
    "Dataset",
    "ModelFrame",
    "build_model_frame",
    "load_sleepstudy",
    "read_csv",
]

NUMERIC = "numeric"
CATEGORICAL = "categorical"
MISSING_TOKENS = frozenset({"", "NA", "N/A", "NaN", "nan", "NULL", "null", "None"})


class DataError(ValueError):
    """Invalid input data. ``row`` is 1-based and counts the header as row 1."""

    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        self.row = row
        self.column = column
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


@dataclass(frozen=True)
class Dataset:
    """Named, typed columns of equal length."""

    columns: Mapping[str, np.ndarray]
    kinds: Mapping[str, str]

    def __post_init__(self):
        lengths = {len(v) for v in self.columns.values()}
        if len(lengths) > 1:
            raise DataError(f"columns differ in length: {sorted(lengths)}")
        if self.n < 3:
            raise DataError(f"need at least 3 rows, got {self.n}")

    @property
    def n(self) -> int:
        return len(next(iter(self.columns.values()))) if self.columns else 0

    @property
    def names(self) -> list[str]:
        return list(self.columns)

    def take(self, index) -> "Dataset":
        """Row subset / permutation."""
        index = np.asarray(index)
        return Dataset({k: v[index] for k, v in self.columns.items()}, dict(self.kinds))

    @classmethod
    def from_mapping(cls, data, kinds: Mapping[str, str] | None = None) -> "Dataset":
        """Build from a dict of sequences or a pandas DataFrame.

        Columns are numeric when they convert to finite floats, else categorical.
        """
        kinds = dict(kinds or {})
        names = list(data.columns) if hasattr(data, "columns") else list(data)
        columns, out_kinds = {}, {}
        for name in names:
            values = np.asarray(data[name])
            kind = kinds.get(name)
            if kind is None:
                kind = NUMERIC if _is_numeric_array(values) else CATEGORICAL
            if kind == NUMERIC:
                try:
                    col = values.astype(float)
                except (TypeError, ValueError):
                    raise DataError("non-numeric value in numeric column", column=name) from None
                if not np.all(np.isfinite(col)):
                    row = int(np.flatnonzero(~np.isfinite(col))[0]) + 2
                    raise DataError("missing or non-finite value", row=row, column=name)
            elif kind == CATEGORICAL:
                col = np.array([str(v) for v in values], dtype=object)
            else:
                raise DataError(f"unknown column kind {kind!r}", column=name)
            columns[str(name)] = col
            out_kinds[str(name)] = kind
        return cls(columns, out_kinds)


def _is_numeric_array(values: np.ndarray) -> bool:
    if values.dtype.kind in "biuf":
        return True
    try:
        col = values.astype(float)
    except (TypeError, ValueError):
        return False
    return bool(np.all(np.isfinite(col)))


def _parse_finite(text: str) -> float | None:
    try:
        value = float(text)
    except ValueError:
        return None
    return value if math.isfinite(value) else None


def read_csv(path, schema_hints: Mapping[str, str] | None = None) -> Dataset:
    """Read a header-first CSV file into a :class:`Dataset`.

    Column kinds come from ``schema_hints`` when given, otherwise a column is
    numeric if every cell parses as a finite decimal. Missing cells are an error.
    """
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("utf-8-sig")
    except UnicodeDecodeError as exc:
        raise DataError(f"file is not valid UTF-8 (byte {exc.start})") from None
    rows = list(csv.reader(io.StringIO(text, newline="")))
    while rows and not any(cell.strip() for cell in rows[-1]):
        rows.pop()
    if not rows:
        raise DataError("empty file")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        raise DataError("duplicate column names in header", row=1)
    body = rows[1:]
    if not body:
        raise DataError("empty body: header row only")

    hints = dict(schema_hints or {})
    unknown = set(hints) - set(header)
    if unknown:
        raise DataError(f"schema hints for unknown columns {sorted(unknown)}")

    cells: list[list[str]] = [[] for _ in header]
    for i, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise DataError(f"ragged row: expected {len(header)} fields, got {len(row)}", row=i)
        for j, cell in enumerate(row):
            cell = cell.strip()
            if cell in MISSING_TOKENS:
                raise DataError("missing value", row=i, column=header[j])
            cells[j].append(cell)

    columns, kinds = {}, {}
    for name, values in zip(header, cells):
        kind = hints.get(name)
        parsed = [_parse_finite(v) for v in values]
        if kind is None:
            kind = NUMERIC if all(p is not None for p in parsed) else CATEGORICAL
        if kind == NUMERIC:
            for i, p in enumerate(parsed):
                if p is None:
                    raise DataError(f"non-numeric value {values[i]!r}", row=i + 2, column=name)
            columns[name] = np.array(parsed, dtype=float)
        elif kind == CATEGORICAL:
            columns[name] = np.array(values, dtype=object)
        else:
            raise DataError(f"unknown column kind {kind!r}", column=name)
        kinds[name] = kind
    return Dataset(columns, kinds)


def load_sleepstudy() -> Dataset:
    """The lme4 sleep-deprivation data: 180 rows of Reaction, Days, Subject."""
    path = Path(__file__).with_name("data") / "sleepstudy.csv"
    return read_csv(path, {"Subject": CATEGORICAL})


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ModelFrame:
    """Numeric objects of the model ``y = mu 1 + X beta + sum_i Z_i u_i + e``.

    ``X`` excludes the intercept column. All arrays are read-only.
    """

    y: np.ndarray
    X: np.ndarray
    z_blocks: tuple[np.ndarray, ...]
    block_labels: tuple[str, ...] = ()
    column_labels_X: tuple[str, ...] = ()
    response: str = "y"
    level_labels: tuple[tuple[str, ...], ...] = field(default=())

    def __post_init__(self):
        y = _readonly(np.ravel(self.y))
        n = y.shape[0]
        X = _readonly(np.reshape(self.X, (n, -1)) if np.size(self.X) else np.zeros((n, 0)))
        blocks = tuple(_readonly(np.reshape(z, (n, -1))) for z in self.z_blocks)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "z_blocks", blocks)
        if not self.block_labels:
            object.__setattr__(self, "block_labels", tuple(f"Z{i + 1}" for i in range(len(blocks))))
        if not self.column_labels_X:
            object.__setattr__(self, "column_labels_X", tuple(f"x{j + 1}" for j in range(X.shape[1])))
        if not self.level_labels:
            object.__setattr__(
                self, "level_labels", tuple(tuple(str(c) for c in range(z.shape[1])) for z in blocks)
            )
        if len(self.block_labels) != len(blocks) or len(self.column_labels_X) != X.shape[1]:
            raise DataError("label count does not match design dimensions")
        for z, label in zip(blocks, self.block_labels):
            if z.shape[1] < 1:
                raise DataError(f"random block {label!r} has no columns")
        for name, a in [("y", y), ("X", X), *zip(self.block_labels, blocks)]:
            if not np.all(np.isfinite(a)):
                raise DataError(f"non-finite entries in {name}")
        if n <= X.shape[1] + 1:
            raise DataError(f"need n > k + 1 observations (n={n}, k={X.shape[1]})")
        check_full_rank(np.column_stack([np.ones(n), X]), ("(Intercept)", *self.column_labels_X))

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def k(self) -> int:
        return self.X.shape[1]

    @property
    def r(self) -> int:
        return len(self.z_blocks)

    @property
    def p(self) -> tuple[int, ...]:
        return tuple(z.shape[1] for z in self.z_blocks)

    @cached_property
    def Z(self) -> np.ndarray:
        """All random blocks side by side, ``n x sum(p_i)``."""
        if not self.z_blocks:
            return _readonly(np.zeros((self.n, 0)))
        return _readonly(np.hstack(self.z_blocks))

    @cached_property
    def block_slices(self) -> tuple[slice, ...]:
        edges = np.concatenate([[0], np.cumsum(self.p)]).astype(int)
        return tuple(slice(a, b) for a, b in zip(edges[:-1], edges[1:]))

    def with_response(self, y) -> "ModelFrame":
        """Same design, different response (used by the bootstrap)."""
        return ModelFrame(
            y, self.X, self.z_blocks, self.block_labels, self.column_labels_X,
            self.response, self.level_labels,
        )


def check_full_rank(x_tilde: np.ndarray, labels: Sequence[str] = ()) -> None:
    """Raise :class:`DataError` unless ``x_tilde`` has full column rank.

    Numerical rank from pivoted QR with tolerance ``n * eps * max column norm``.
    """
    n, m = x_tilde.shape
    if m == 0:
        return
    _, R, piv = linalg.qr(x_tilde, mode="economic", pivoting=True)
    tol = n * np.finfo(float).eps * np.max(np.linalg.norm(x_tilde, axis=0))
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > tol))
    if rank < m:
        dropped = [labels[j] if j < len(labels) else str(j) for j in piv[rank:]]
        raise DataError(f"fixed design [1, X] is rank deficient (rank {rank} < {m}); "
                        f"dependent columns: {dropped}")


def _levels(values: np.ndarray) -> tuple[list, np.ndarray]:
    """Levels in first-appearance order and the integer code of each row."""
    lookup: dict = {}
    codes = np.empty(len(values), dtype=int)
    for i, v in enumerate(values):
        codes[i] = lookup.setdefault(v, len(lookup))
    return list(lookup), codes


def _level_label(v) -> str:
    if isinstance(v, float):
        return f"{v:g}"
    return str(v)


def build_model_frame(data: Dataset, ast: FormulaAst) -> ModelFrame:
    """Materialize ``y``, ``X`` and the ``Z_i`` blocks described by ``ast``.

    An intercept term ``(1 || g)`` becomes the one-hot indicator of ``g``'s
    levels; a slope term ``(x || g)`` is that indicator with each column
    multiplied by ``x``. Levels are ordered by first appearance. Numeric
    grouping columns are treated as labels.
    """
    for name in sorted(ast.columns):
        if name not in data.columns:
            raise DataError(f"unknown column {name!r} in formula", column=name)

    def numeric(name: str, role: str) -> np.ndarray:
        if data.kinds[name] != NUMERIC:
            raise DataError(f"categorical column cannot be used as {role}", column=name)
        return np.asarray(data.columns[name], dtype=float)

    y = numeric(ast.response, "the response")
    n = data.n
    X = np.column_stack([numeric(t, "a fixed effect") for t in ast.fixed_terms]) if ast.fixed_terms \
        else np.zeros((n, 0))

    blocks, labels, level_labels = [], [], []
    for spec in ast.random_specs:
        levels, codes = _levels(data.columns[spec.group])
        z = np.zeros((n, len(levels)))
        z[np.arange(n), codes] = 1.0
        if not spec.is_intercept:
            z *= numeric(spec.term, "a random slope")[:, None]
            labels.append(f"{spec.term} | {spec.group}")
        else:
            labels.append(f"(Intercept) | {spec.group}")
        blocks.append(z)
        level_labels.append(tuple(_level_label(v) for v in levels))

    return ModelFrame(
        y=y,
        X=X,
        z_blocks=tuple(blocks),
        block_labels=tuple(labels),
        column_labels_X=tuple(ast.fixed_terms),
        response=ast.response,
        level_labels=tuple(level_labels),
    )
