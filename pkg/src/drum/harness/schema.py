"""CSV ingestion with declared column roles, and source-statistics standardization."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from ..errors import ConfigError, InputError, SchemaError
from ..simgen import LabeledSet, UnlabeledSet

ROLES = ("stable_X", "missing_A", "outcome_Y", "ignore")
TASKS = ("regression", "binary")


@dataclass
class ColumnSchema:
    """Role of each declared column. Undeclared columns are dropped on read."""

    roles: dict
    task: str = "regression"

    def __post_init__(self):
        bad = {c: r for c, r in self.roles.items() if r not in ROLES}
        if bad:
            col = next(iter(bad))
            raise SchemaError(f"column {col!r} has unknown role {bad[col]!r}", column=col)
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        if not self.x_cols:
            raise SchemaError("schema declares no stable_X column")
        if len(self.y_cols) > 1:
            raise SchemaError("schema declares more than one outcome column", column=self.y_cols[1])

    def _cols(self, role: str) -> list:
        return [c for c, r in self.roles.items() if r == role]

    @property
    def x_cols(self) -> list:
        return self._cols("stable_X")

    @property
    def a_cols(self) -> list:
        return self._cols("missing_A")

    @property
    def y_cols(self) -> list:
        return self._cols("outcome_Y")

    def to_dict(self) -> dict:
        return {"columns": dict(self.roles), "task": self.task}

    def to_ordered(self) -> dict:
        """Column order as a list of pairs, safe under key-sorted JSON."""
        return {"columns": [[c, r] for c, r in self.roles.items()], "task": self.task}

    @classmethod
    def from_dict(cls, blob: dict) -> "ColumnSchema":
        if not isinstance(blob, dict) or "columns" not in blob:
            raise ConfigError("schema needs a 'columns' mapping of column name to role")
        cols = blob["columns"]
        roles = dict((str(c), r) for c, r in cols) if isinstance(cols, list) else {str(c): r for c, r in cols.items()}
        return cls(roles, blob.get("task", "regression"))

    @classmethod
    def load(cls, path) -> "ColumnSchema":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh))


@dataclass
class Table:
    header: list
    data: np.ndarray

    def column(self, name: str) -> np.ndarray:
        return self.data[:, self.header.index(name)]

    def columns(self, names) -> np.ndarray:
        idx = [self.header.index(c) for c in names]
        return self.data[:, idx] if idx else np.zeros((len(self.data), 0))


def read_csv(path) -> Table:
    """Comma-separated, header row, '.' decimals; every cell must parse as a float."""
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError(f"{path}: missing header row")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        dup = next(h for h in header if header.count(h) > 1)
        raise SchemaError(f"{path}: duplicate column {dup!r}", column=dup)
    body = rows[1:]
    data = np.empty((len(body), len(header)))
    for i, row in enumerate(body):
        if len(row) != len(header):
            raise SchemaError(f"{path}: row {i + 2} has {len(row)} fields, header has {len(header)}")
        for j, cell in enumerate(row):
            try:
                data[i, j] = float(cell)
            except ValueError:
                raise SchemaError(f"{path}: non-numeric value {cell!r} in column {header[j]!r}", column=header[j]) from None
    if not np.isfinite(data).all():
        j = int(np.flatnonzero(~np.isfinite(data).all(axis=0))[0])
        raise SchemaError(f"{path}: non-finite value in column {header[j]!r}", column=header[j])
    return Table(header, data)


def fmt(v: float) -> str:
    return repr(float(v))


def write_csv(path, header, columns) -> None:
    cols = [np.asarray(c, dtype=np.float64).reshape(len(c), -1) for c in columns]
    data = np.hstack(cols) if cols else np.zeros((0, 0))
    if data.shape[1] != len(header):
        raise ConfigError("header and data widths disagree")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in data:
            w.writerow([fmt(v) for v in row])


def _require(table: Table, cols, path) -> None:
    for c in cols:
        if c not in table.header:
            raise SchemaError(f"{path}: declared column {c!r} is missing", column=c)


def _check_outcome(y: np.ndarray, schema: ColumnSchema, path) -> None:
    if schema.task == "binary" and not np.isin(y, (0.0, 1.0)).all():
        raise SchemaError(f"{path}: binary outcome column must hold 0/1 values", column=schema.y_cols[0])


def load_source(path, schema: ColumnSchema) -> LabeledSet:
    if not schema.y_cols:
        raise SchemaError("schema declares no outcome column")
    t = read_csv(path)
    _require(t, schema.x_cols + schema.a_cols + schema.y_cols, path)
    y = t.column(schema.y_cols[0])
    _check_outcome(y, schema, path)
    return LabeledSet(t.columns(schema.x_cols), t.columns(schema.a_cols), y)


def load_target(path, schema: ColumnSchema) -> UnlabeledSet:
    """Target covariates only. Declared A/Y columns in a target file are a contract violation;
    any undeclared column is dropped before the data reach a fit stage."""
    t = read_csv(path)
    for c in schema.a_cols + schema.y_cols:
        if c in t.header:
            raise SchemaError(f"{path}: target file contains {schema.roles[c]} column {c!r}", column=c)
    _require(t, schema.x_cols, path)
    return UnlabeledSet(t.columns(schema.x_cols), {"rows": len(t.data)})


def load_labeled_eval(path, schema: ColumnSchema) -> tuple[np.ndarray, np.ndarray]:
    """``(X, Y)`` of an evaluation file; A columns, if present, are ignored."""
    if not schema.y_cols:
        raise SchemaError("schema declares no outcome column")
    t = read_csv(path)
    ycol = schema.y_cols[0]
    if ycol not in t.header:
        raise SchemaError(f"{path}: evaluation file lacks the label column {ycol!r}", column=ycol)
    _require(t, schema.x_cols, path)
    y = t.column(ycol)
    _check_outcome(y, schema, path)
    return t.columns(schema.x_cols), y


def load_features(path, schema: ColumnSchema) -> np.ndarray:
    t = read_csv(path)
    _require(t, schema.x_cols, path)
    return t.columns(schema.x_cols)


@dataclass
class Standardizer:
    """Centre and scale continuous columns with source statistics; 0/1 columns pass through."""

    x_mean: np.ndarray
    x_scale: np.ndarray
    a_mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    a_scale: np.ndarray = field(default_factory=lambda: np.ones(0))

    @staticmethod
    def _stats(M: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        mean = M.mean(axis=0) if len(M) else np.zeros(M.shape[1])
        sd = M.std(axis=0) if len(M) else np.ones(M.shape[1])
        binary = np.array([np.isin(M[:, j], (0.0, 1.0)).all() for j in range(M.shape[1])], dtype=bool)
        keep = binary | (sd == 0)
        return np.where(keep, 0.0, mean), np.where(keep, 1.0, sd)

    @classmethod
    def fit(cls, source: LabeledSet) -> "Standardizer":
        xm, xs = cls._stats(source.X)
        am, as_ = cls._stats(source.A)
        return cls(xm, xs, am, as_)

    @classmethod
    def identity(cls, d_X: int, d_A: int = 0) -> "Standardizer":
        return cls(np.zeros(d_X), np.ones(d_X), np.zeros(d_A), np.ones(d_A))

    def X(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != len(self.x_mean):
            raise SchemaError(f"expected {len(self.x_mean)} stable covariate columns, got shape {X.shape}")
        return (X - self.x_mean) / self.x_scale

    def source(self, s: LabeledSet) -> LabeledSet:
        return LabeledSet(self.X(s.X), (s.A - self.a_mean) / self.a_scale, s.Y, s.fbar)

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("x_mean", "x_scale", "a_mean", "a_scale")}

    @classmethod
    def from_dict(cls, blob: dict) -> "Standardizer":
        return cls(*(np.asarray(blob[k], dtype=np.float64) for k in ("x_mean", "x_scale", "a_mean", "a_scale")))
