"""Tabular data with explicit missingness.

A :class:`DataTable` stores values column-major in a float array with NaN
marking absent cells; the observed mask (1 = observed) is derived from it so
the two can never disagree. Tables are treated as immutable: every operation
returns a new table.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

KINDS = ("continuous", "binary", "categorical")
ROLES = ("outcome", "predictor", "auxiliary", "excluded")
TRANSFORMS = ("log", "sqrt", "none")
MISSING_TOKENS = ("", "NA")


class DataError(ValueError):
    """Base class for data-layer failures."""


class SchemaError(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        super().__init__(message)
        self.row = row
        self.column = column


class DomainError(DataError):
    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        super().__init__(message)
        self.row = row
        self.column = column


class StratificationError(DataError):
    pass


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str = "continuous"
    role: str = "predictor"
    transform: str | None = None

    def __post_init__(self):
        if not self.name or not isinstance(self.name, str):
            raise SchemaError(f"invalid column name {self.name!r}")
        if self.kind not in KINDS:
            raise SchemaError(f"column {self.name}: unknown kind {self.kind!r}")
        if self.role not in ROLES:
            raise SchemaError(f"column {self.name}: unknown role {self.role!r}")
        if self.transform is not None and self.transform not in TRANSFORMS:
            raise SchemaError(f"column {self.name}: unknown transform {self.transform!r}")

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "role": self.role, "transform": self.transform}

    @classmethod
    def from_dict(cls, d: dict) -> "ColumnSpec":
        return cls(
            name=d["name"],
            kind=d.get("kind", "continuous"),
            role=d.get("role", "predictor"),
            transform=d.get("transform"),
        )


@dataclass(frozen=True)
class DataTable:
    """Rectangular dataset; ``values[i, a]`` is NaN exactly when cell (i, a) is missing."""

    columns: tuple[ColumnSpec, ...]
    values: np.ndarray

    def __post_init__(self):
        cols = tuple(self.columns)
        object.__setattr__(self, "columns", cols)
        vals = np.array(self.values, dtype=float, copy=True)
        if vals.ndim == 1 and len(cols) == 0:
            vals = vals.reshape(0, 0)
        if vals.ndim != 2 or vals.shape[1] != len(cols):
            raise SchemaError(f"values shape {vals.shape} does not match {len(cols)} columns")
        names = [c.name for c in cols]
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise SchemaError(f"duplicate column names: {dup}")
        if np.isinf(vals).any():
            raise DataError("infinite values are not allowed")
        for j, c in enumerate(cols):
            if c.kind == "binary":
                obs = vals[~np.isnan(vals[:, j]), j]
                if not np.isin(obs, (0.0, 1.0)).all():
                    raise DataError(f"binary column {c.name} has values outside {{0, 1}}")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "_index", {n: j for j, n in enumerate(names)})

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    @property
    def mask(self) -> np.ndarray:
        """Boolean (n_rows, n_cols) array, True where observed."""
        return ~np.isnan(self.values)

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise SchemaError(f"no column named {name!r}") from None

    def spec(self, name: str) -> ColumnSpec:
        return self.columns[self.index(name)]

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.index(name)]

    def columns_with_role(self, *roles: str) -> list[str]:
        return [c.name for c in self.columns if c.role in roles]

    @property
    def outcome(self) -> str:
        outs = self.columns_with_role("outcome")
        if len(outs) != 1:
            raise SchemaError(f"expected exactly one outcome column, found {outs}")
        spec = self.spec(outs[0])
        if spec.kind != "binary":
            raise SchemaError(f"outcome column {spec.name} must be binary")
        return outs[0]

    def with_values(self, values: np.ndarray) -> "DataTable":
        return DataTable(self.columns, values)

    def take(self, rows) -> "DataTable":
        rows = np.asarray(rows)
        if rows.dtype != bool:
            rows = rows.astype(np.intp)
        return DataTable(self.columns, self.values[rows])

    def select(self, names: Sequence[str]) -> "DataTable":
        idx = [self.index(n) for n in names]
        return DataTable(tuple(self.columns[j] for j in idx), self.values[:, idx])

    def append_columns(self, specs: Sequence[ColumnSpec], values: np.ndarray) -> "DataTable":
        values = np.asarray(values, dtype=float).reshape(self.n_rows, len(specs))
        return DataTable(self.columns + tuple(specs), np.hstack([self.values, values]))

    def complete_rows(self, names: Sequence[str] | None = None) -> np.ndarray:
        """Boolean row indicator: all of ``names`` (default: every column) observed."""
        m = self.mask if names is None else self.mask[:, [self.index(n) for n in names]]
        return m.all(axis=1)

    def equals(self, other: "DataTable") -> bool:
        return (
            self.columns == other.columns
            and self.values.shape == other.values.shape
            and np.array_equal(self.values, other.values, equal_nan=True)
        )


def _format_cell(v: float) -> str:
    if math.isnan(v):
        return "NA"
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def save_csv(table: DataTable, path: str | Path) -> None:
    """Write ``table`` with shortest round-trip float formatting; missing cells as ``NA``."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(table.names)
        for row in table.values:
            w.writerow([_format_cell(v) for v in row])


def load_csv(path: str | Path, schema: Sequence[ColumnSpec]) -> DataTable:
    """Read a CSV into a DataTable ordered as ``schema``.

    Empty cells and ``NA`` become missing. Any other cell must parse as a
    float, otherwise :class:`ParseError` names the (1-based data) row and column.
    Extra CSV columns not in the schema are ignored.
    """
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file, header row required") from None
        missing = [c.name for c in schema if c.name not in header]
        if missing:
            raise SchemaError(f"{path}: header lacks schema columns {missing}")
        pos = [header.index(c.name) for c in schema]
        rows = []
        for r, rec in enumerate(reader, start=1):
            if not rec:
                continue
            if len(rec) != len(header):
                raise ParseError(f"{path}: row {r} has {len(rec)} fields, expected {len(header)}", row=r)
            out = []
            for c, p in zip(schema, pos):
                cell = rec[p].strip()
                if cell in MISSING_TOKENS:
                    out.append(math.nan)
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(
                        f"{path}: cannot parse {cell!r} at row {r}, column {c.name}", row=r, column=c.name
                    ) from None
                if not math.isfinite(v):
                    raise ParseError(f"{path}: non-finite value at row {r}, column {c.name}", row=r, column=c.name)
                out.append(v)
            rows.append(out)
    values = np.array(rows, dtype=float).reshape(len(rows), len(schema))
    return DataTable(tuple(schema), values)


def filter_high_missing_rows(t: DataTable, threshold: float) -> tuple[DataTable, dict]:
    """Drop rows whose fraction of missing predictor cells is at least ``threshold``."""
    if not 0 < threshold <= 1:
        raise ValueError("threshold must lie in (0, 1]")
    preds = t.columns_with_role("predictor")
    if not preds:
        return t, {"removed": 0, "kept": t.n_rows, "threshold": threshold}
    miss = ~t.mask[:, [t.index(p) for p in preds]]
    frac = miss.mean(axis=1)
    drop = frac >= threshold
    report = {"removed": int(drop.sum()), "kept": int((~drop).sum()), "threshold": threshold}
    return t.take(np.flatnonzero(~drop)), report


@dataclass
class TransformLedger:
    """Source column -> (derived column, transform kind)."""

    entries: dict[str, tuple[str, str]] = field(default_factory=dict)

    @classmethod
    def from_schema(cls, columns: Iterable[ColumnSpec]) -> "TransformLedger":
        entries = {}
        for c in columns:
            if c.transform in ("log", "sqrt"):
                entries[c.name] = (derived_name(c.name, c.transform), c.transform)
        return cls(entries)

    def derived(self, source: str) -> str:
        return self.entries[source][0]

    def analysis_name(self, name: str) -> str:
        """Name of the column used in analysis models for ``name``."""
        return self.entries[name][0] if name in self.entries else name


def derived_name(source: str, kind: str) -> str:
    return f"{kind}_{source}"


def forward_transform(kind: str, x: np.ndarray) -> np.ndarray:
    if kind == "log":
        return np.log(x)
    if kind == "sqrt":
        return np.sqrt(x)
    if kind == "none":
        return np.array(x, dtype=float, copy=True)
    raise ValueError(f"unknown transform {kind!r}")


def inverse_transform(kind: str, x: np.ndarray) -> np.ndarray:
    if kind == "log":
        return np.exp(x)
    if kind == "sqrt":
        return np.square(x)
    if kind == "none":
        return np.array(x, dtype=float, copy=True)
    raise ValueError(f"unknown transform {kind!r}")


def check_transform_domain(kind: str, x: np.ndarray, column: str) -> None:
    obs = ~np.isnan(x)
    if kind == "log":
        bad = np.flatnonzero(obs & ~(x > 0))
        if bad.size:
            raise DomainError(
                f"log of non-positive value {x[bad[0]]!r} at row {bad[0]}, column {column}",
                row=int(bad[0]),
                column=column,
            )
    elif kind == "sqrt":
        bad = np.flatnonzero(obs & ~(x >= 0))
        if bad.size:
            raise DomainError(
                f"sqrt of negative value {x[bad[0]]!r} at row {bad[0]}, column {column}",
                row=int(bad[0]),
                column=column,
            )


def apply_transforms(t: DataTable, ledger: TransformLedger) -> DataTable:
    """Append one derived column per ledger entry (natural log / square root)."""
    specs, cols = [], []
    for source, (name, kind) in ledger.entries.items():
        x = t.column(source)
        check_transform_domain(kind, x, source)
        with np.errstate(invalid="ignore", divide="ignore"):
            cols.append(forward_transform(kind, x))
        src = t.spec(source)
        specs.append(ColumnSpec(name, kind="continuous", role=src.role if src.role != "outcome" else "auxiliary"))
    if not specs:
        return t
    return t.append_columns(specs, np.column_stack(cols))


def split_train_validation(t: DataTable, fraction: float, seed: int) -> tuple[DataTable, DataTable]:
    """Outcome-stratified random split; ``fraction`` of each stratum goes to training.

    Each stratum contributes at least one row to each part, so a stratum needs
    two or more rows.
    """
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    y = t.column(t.outcome)
    if np.isnan(y).any():
        raise StratificationError("outcome has missing values; cannot stratify")
    rng = np.random.default_rng(seed)
    train, valid = [], []
    for level in (0.0, 1.0):
        idx = np.flatnonzero(y == level)
        if idx.size == 0:
            continue
        if idx.size < 2:
            raise StratificationError(f"outcome stratum {int(level)} has {idx.size} row(s); need at least 2")
        idx = rng.permutation(idx)
        k = int(round(fraction * idx.size))
        k = min(max(k, 1), idx.size - 1)
        train.append(idx[:k])
        valid.append(idx[k:])
    tr = np.sort(np.concatenate(train))
    va = np.sort(np.concatenate(valid))
    return t.take(tr), t.take(va)
