"""Loading, cleaning and tag mapping for CSV process logs."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError, LoadError

logger = logging.getLogger(__name__)

KINDS = ("analog", "binary", "state")
MAX_STATE_LEVELS = 10
LABEL_COLUMN = "logic_label"

_TIME_FORMATS = (
    "%d/%m/%Y %I:%M:%S %p",
    "%d/%m/%Y %H:%M:%S",
    "%m/%d/%Y %I:%M:%S.%f %p",
    "%m/%d/%Y %I:%M:%S %p",
    "%Y-%m-%d %H:%M:%S.%f",
)


@dataclass(frozen=True)
class TagTable:
    """Timestamped multivariate process log.

    Row ``t`` of ``values`` is the state vector at ``timestamps[t]``; column
    ``i`` holds tag ``names[i]`` whose kind is ``kinds[i]``.
    """

    timestamps: np.ndarray
    names: tuple[str, ...]
    kinds: tuple[str, ...]
    values: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self) -> None:
        ts = np.array(self.timestamps, dtype=np.float64)
        vals = np.array(self.values, dtype=np.float64)
        if vals.ndim != 2:
            raise DataError(f"values must be 2-D, got shape {vals.shape}")
        names = tuple(self.names)
        kinds = tuple(self.kinds)
        if len(names) != vals.shape[1] or len(kinds) != vals.shape[1]:
            raise DataError(
                f"{len(names)} names / {len(kinds)} kinds for {vals.shape[1]} columns"
            )
        if len(set(names)) != len(names):
            raise DataError("duplicate tag names")
        bad = [k for k in kinds if k not in KINDS]
        if bad:
            raise DataError(f"unknown column kinds {bad}")
        if ts.shape != (vals.shape[0],):
            raise DataError(f"{ts.shape[0]} timestamps for {vals.shape[0]} rows")
        if ts.size > 1 and not np.all(np.diff(ts) > 0):
            raise DataError("timestamps must be strictly increasing")
        labels = self.labels
        if labels is not None:
            labels = np.array(labels, dtype=np.int8)
            if labels.shape != (vals.shape[0],):
                raise DataError("label column length differs from row count")
            if not np.isin(labels, (0, 1)).all():
                raise DataError("labels must be 0/1")
            labels.setflags(write=False)
        ts.setflags(write=False)
        vals.setflags(write=False)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "kinds", kinds)
        object.__setattr__(self, "labels", labels)

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise DataError(f"tag {name!r} not in table") from None

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.index(name)]

    def select(self, names: Sequence[str]) -> TagTable:
        missing = [n for n in names if n not in self.names]
        if missing:
            raise DataError(f"tags not in table: {missing}")
        idx = [self.names.index(n) for n in names]
        return replace(
            self,
            names=tuple(names),
            kinds=tuple(self.kinds[i] for i in idx),
            values=self.values[:, idx],
        )

    def with_labels(self, labels: np.ndarray | None) -> TagTable:
        return replace(self, labels=labels)

    def with_values(self, values: np.ndarray) -> TagTable:
        return replace(self, values=values)

    def equals(self, other: TagTable) -> bool:
        same_labels = (self.labels is None and other.labels is None) or (
            self.labels is not None
            and other.labels is not None
            and np.array_equal(self.labels, other.labels)
        )
        return (
            self.names == other.names
            and self.kinds == other.kinds
            and np.array_equal(self.timestamps, other.timestamps)
            and np.array_equal(self.values, other.values, equal_nan=True)
            and same_labels
        )


@dataclass(frozen=True)
class CleaningReport:
    dropped_rows: int = 0
    imputed_cells: int = 0
    zero_columns: tuple[str, ...] = ()
    inf_cells: int = 0
    null_cells: int = 0

    @property
    def actions(self) -> int:
        return self.dropped_rows + self.imputed_cells

    def to_dict(self) -> dict:
        return {
            "dropped_rows": self.dropped_rows,
            "imputed_cells": self.imputed_cells,
            "zero_columns": list(self.zero_columns),
            "inf_cells": self.inf_cells,
            "null_cells": self.null_cells,
        }


@dataclass(frozen=True)
class TagMapping:
    """Ordered source-tag to canonical-feature renames."""

    entries: tuple[tuple[str, str], ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        entries = tuple((str(s), str(c)) for s, c in self.entries)
        canon = [c for _, c in entries]
        dupes = sorted({c for c in canon if canon.count(c) > 1})
        if dupes:
            raise DataError(f"duplicate canonical names in mapping: {dupes}")
        object.__setattr__(self, "entries", entries)

    @property
    def canonical(self) -> list[str]:
        return [c for _, c in self.entries]

    @classmethod
    def identity(cls, names: Iterable[str]) -> TagMapping:
        return cls(tuple((n, n) for n in names))

    @classmethod
    def from_json(cls, text: str) -> TagMapping:
        try:
            doc = json.loads(text)
            return cls(tuple((e["source"], e["canonical"]) for e in doc))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise LoadError(f"malformed tag mapping: {exc}") from exc

    @classmethod
    def read(cls, path: str | Path) -> TagMapping:
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def to_json(self) -> str:
        return json.dumps(
            [{"source": s, "canonical": c} for s, c in self.entries], indent=2
        )

    def restricted_to(self, canonical: Sequence[str]) -> TagMapping:
        """Sub-mapping covering exactly ``canonical``, in that order."""
        lookup = {c: s for s, c in self.entries}
        missing = [c for c in canonical if c not in lookup]
        if missing:
            raise DataError(f"mapping does not provide canonical features {missing}")
        return TagMapping(tuple((lookup[c], c) for c in canonical))


def infer_kind(column: np.ndarray) -> str:
    finite = column[np.isfinite(column)]
    if finite.size == 0:
        return "analog"
    levels = np.unique(finite)
    if (
        levels.size <= MAX_STATE_LEVELS
        and np.all(levels >= 0)
        and np.all(levels == np.round(levels))
    ):
        return "binary" if np.all(np.isin(levels, (0.0, 1.0))) else "state"
    return "analog"


def _parse_time(text: str, row: int, col: str) -> float:
    text = text.strip()
    try:
        return float(text)
    except ValueError:
        pass
    try:
        return datetime.fromisoformat(text).timestamp()
    except ValueError:
        pass
    for fmt in _TIME_FORMATS:
        try:
            return datetime.strptime(text, fmt).timestamp()
        except ValueError:
            continue
    raise LoadError(f"row {row}, column {col!r}: unparseable timestamp {text!r}")


def _parse_cell(text: str, row: int, col: str) -> float:
    text = text.strip()
    if text == "" or text.lower() in ("na", "null", "none"):
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise LoadError(f"row {row}, column {col!r}: not a number {text!r}") from None


def load_csv(
    path: str | Path,
    kind_hints: Mapping[str, str] | None = None,
    *,
    timestamp_column: str | int = 0,
    label_column: str | None = LABEL_COLUMN,
    ignore_columns: Sequence[str] = (),
) -> TagTable:
    """Read a process log.

    The header row names the tags. One column holds timestamps (numeric
    seconds or a date string); an optional ``label_column`` becomes the
    table's labels. Row numbers in error messages are 1-based data rows.
    """
    kind_hints = dict(kind_hints or {})
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise LoadError(f"{path}: empty file") from None
        except (csv.Error, UnicodeDecodeError) as exc:
            raise LoadError(f"{path}: {exc}") from exc
        if isinstance(timestamp_column, int):
            if not 0 <= timestamp_column < len(header):
                raise LoadError(f"timestamp column {timestamp_column} out of range")
            ts_idx = timestamp_column
        else:
            if timestamp_column not in header:
                raise LoadError(f"timestamp column {timestamp_column!r} not in header")
            ts_idx = header.index(timestamp_column)
        label_idx = header.index(label_column) if label_column in header else None
        skip = {header.index(c) for c in ignore_columns if c in header}
        data_idx = [
            i for i in range(len(header)) if i not in skip and i not in (ts_idx, label_idx)
        ]
        times: list[float] = []
        rows: list[list[float]] = []
        labels: list[float] = []
        try:
            for r, fields in enumerate(reader, start=1):
                if not fields:
                    continue
                if len(fields) != len(header):
                    raise LoadError(
                        f"row {r}: {len(fields)} fields, header has {len(header)}"
                    )
                times.append(_parse_time(fields[ts_idx], r, header[ts_idx]))
                rows.append([_parse_cell(fields[i], r, header[i]) for i in data_idx])
                if label_idx is not None:
                    labels.append(_parse_cell(fields[label_idx], r, header[label_idx]))
        except (csv.Error, UnicodeDecodeError) as exc:
            raise LoadError(f"{path}: {exc}") from exc

    names = [header[i] for i in data_idx]
    values = np.array(rows, dtype=np.float64).reshape(len(rows), len(names))
    kinds = []
    for j, name in enumerate(names):
        hint = kind_hints.get(name)
        if hint is not None and hint not in KINDS:
            raise LoadError(f"unknown kind hint {hint!r} for {name!r}")
        kinds.append(hint or infer_kind(values[:, j]))
    ts = np.array(times, dtype=np.float64)
    if ts.size > 1:
        steps = np.diff(ts)
        if np.any(steps <= 0):
            bad = int(np.argmax(steps <= 0)) + 2
            raise LoadError(f"row {bad}: timestamps not strictly increasing")
        if np.any(steps != steps[0]):
            logger.warning("%s: irregular timestamp cadence; rules use row index", path)
    lab = None
    if label_idx is not None:
        lab_arr = np.array(labels)
        if not np.isin(lab_arr, (0.0, 1.0)).all():
            raise LoadError(f"label column {label_column!r} must contain only 0/1")
        lab = lab_arr.astype(np.int8)
    return TagTable(ts, tuple(names), tuple(kinds), values, lab)


def write_csv(
    table: TagTable,
    path: str | Path,
    *,
    timestamp_name: str = "timestamp",
    label_column: str = LABEL_COLUMN,
) -> None:
    """Write ``table`` so that :func:`load_csv` restores it bit-exactly.

    Reals use ``repr`` (shortest round-trip form); integral values in
    binary/state columns are written without a fraction.
    """
    header = [timestamp_name, *table.names]
    if table.labels is not None:
        header.append(label_column)
    integral = [k != "analog" for k in table.kinds]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(header)
        for t in range(table.n_rows):
            row = [_fmt(table.timestamps[t], False)]
            row.extend(_fmt(v, i) for v, i in zip(table.values[t], integral))
            if table.labels is not None:
                row.append(str(int(table.labels[t])))
            out.writerow(row)


def _fmt(v: float, integral: bool) -> str:
    v = float(v)
    if math.isnan(v):
        return ""
    if integral and v.is_integer():
        return str(int(v))
    return repr(v)


def clean(table: TagTable, policy: str = "drop") -> tuple[TagTable, CleaningReport]:
    """Remove or forward-fill null/NaN/infinite cells.

    All-zero columns are only reported; feature selection decides on them.
    """
    if table.n_rows == 0:
        raise DataError("cannot clean an empty table")
    vals = table.values
    is_nan = np.isnan(vals)
    is_inf = np.isinf(vals)
    bad = is_nan | is_inf
    null_cells = int(is_nan.sum())
    inf_cells = int(is_inf.sum())
    if policy == "drop":
        keep = ~bad.any(axis=1)
        out = TagTable(
            table.timestamps[keep],
            table.names,
            table.kinds,
            vals[keep],
            None if table.labels is None else table.labels[keep],
        )
        dropped, imputed = int((~keep).sum()), 0
    elif policy == "impute_ffill":
        first_bad = np.flatnonzero(bad[0])
        if first_bad.size:
            names = [table.names[j] for j in first_bad]
            raise DataError(f"cannot forward-fill row 0 of columns {names}")
        filled = vals.copy()
        for j in np.flatnonzero(bad.any(axis=0)):
            col = filled[:, j]
            idx = np.where(bad[:, j], 0, np.arange(col.size))
            np.maximum.accumulate(idx, out=idx)
            filled[:, j] = col[idx]
        out = table.with_values(filled)
        dropped, imputed = 0, int(bad.sum())
    else:
        raise DataError(f"unknown cleaning policy {policy!r}; use 'drop' or 'impute_ffill'")
    if out.n_rows == 0:
        raise DataError("cleaning removed every row")
    zero_cols = tuple(
        n for n, col in zip(out.names, out.values.T) if np.all(col == 0.0)
    )
    report = CleaningReport(dropped, imputed, zero_cols, inf_cells, null_cells)
    return out, report


def map_tags(table: TagTable, mapping: TagMapping) -> TagTable:
    """Project ``table`` onto the mapped columns under their canonical names."""
    missing = [s for s, _ in mapping.entries if s not in table.names]
    if missing:
        raise DataError(f"mapped source tags absent from table: {missing}")
    idx = [table.names.index(s) for s, _ in mapping.entries]
    return TagTable(
        table.timestamps,
        tuple(mapping.canonical),
        tuple(table.kinds[i] for i in idx),
        table.values[:, idx],
        table.labels,
    )
