"""Partitioning, scaling, oversampling, shuffling and windowing.

Training order: derive window targets on the full log, split windows into
train/validation by class, fit the scaler on rows covered by training windows
only, oversample the minority class of training windows, shuffle, and train
chunk by chunk. Windows are gathered from the scaled row matrix on demand so
that only one chunk of windows is materialized at a time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np
import sklearn
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.neighbors import NearestNeighbors

from .errors import ConfigError, DataError
from .rng import make_rng


@dataclass(frozen=True)
class SplitIndices:
    train: np.ndarray
    validation: np.ndarray
    ratio: float
    seed: int


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stratified_split(labels: np.ndarray, ratio: float = 0.7, seed: int = 0) -> SplitIndices:
    """Per class, a seeded permutation sends round(ratio * N_c) units to train."""
    y = np.asarray(labels)
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"split ratio must be in (0, 1), got {ratio}")
    rng = make_rng(seed, "prep/split")
    train, val = [], []
    for cls in (0, 1):
        idx = np.flatnonzero(y == cls)
        if idx.size < 2:
            raise DataError(f"class {cls} has {idx.size} samples; stratified split needs >= 2")
        perm = idx[rng.permutation(idx.size)]
        k = _round_half_up(ratio * idx.size)
        train.append(perm[:k])
        val.append(perm[k:])
    return SplitIndices(np.sort(np.concatenate(train)), np.sort(np.concatenate(val)), ratio, seed)


@dataclass(frozen=True)
class ScalerParams:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> ScalerParams:
        mean = np.array(doc["mean"], dtype=np.float64)
        std = np.array(doc["std"], dtype=np.float64)
        if mean.shape != std.shape or mean.ndim != 1 or np.any(std <= 0):
            raise DataError("invalid scaler parameters")
        return cls(mean, std)


def fit_scaler(X_train: np.ndarray) -> ScalerParams:
    """Column mean and population std; constant columns get std 1."""
    X = np.asarray(X_train, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DataError("cannot fit a scaler on an empty matrix")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return ScalerParams(mean, std)


def apply_scaler(X: np.ndarray, params: ScalerParams) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != params.mean.shape[0]:
        raise DataError(f"matrix has {X.shape[-1]} columns, scaler expects {params.mean.shape[0]}")
    return (X - params.mean) / params.std


def invert_scaler(Z: np.ndarray, params: ScalerParams) -> np.ndarray:
    return Z * params.std + params.mean


# cap on sklearn's pairwise-distance blocks, so neighbour search memory
# does not grow with the number of minority samples
KNN_WORKING_MEMORY_MB = 16


def smote(
    X: np.ndarray, y: np.ndarray, k: int = 5, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Oversample the minority class up to the majority count.

    Each synthetic row is ``x_i + u * (x_nn - x_i)`` with ``x_i`` a random
    minority row, ``x_nn`` one of its ``k`` nearest minority neighbours and
    ``u ~ U(0, 1)``. Synthetic rows are appended after the originals.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.shape[0] != y.shape[0]:
        raise DataError("X and y lengths differ")
    counts = np.array([(y == 0).sum(), (y == 1).sum()])
    minority = int(np.argmin(counts))
    n_new = int(counts.max() - counts.min())
    if n_new == 0:
        return X.copy(), y.copy()
    synth = smote_synthetic(X[y == minority], n_new, k, seed)
    X_out = np.concatenate([X, synth])
    y_out = np.concatenate([y, np.full(n_new, minority, dtype=y.dtype)])
    return X_out, y_out


def smote_synthetic(minority: np.ndarray, n_new: int, k: int = 5, seed: int = 0) -> np.ndarray:
    """``n_new`` interpolated samples from the minority samples alone.

    Only the minority class enters the neighbour search, so callers can pass
    just those samples instead of the whole training set.
    """
    minority = np.asarray(minority, dtype=np.float64)
    if minority.shape[0] < 2:
        raise DataError("SMOTE needs at least 2 minority samples")
    pts = minority.reshape(minority.shape[0], -1)
    k = max(1, min(k, pts.shape[0] - 1))
    rng = make_rng(seed, "prep/smote")
    base = rng.integers(0, pts.shape[0], n_new)
    pick = rng.integers(0, k, n_new)
    u = rng.random(n_new)

    uniq, inv = np.unique(base, return_inverse=True)
    nn = NearestNeighbors(n_neighbors=k + 1, algorithm="brute").fit(pts)
    with sklearn.config_context(working_memory=KNN_WORKING_MEMORY_MB):
        neigh = nn.kneighbors(pts[uniq], return_distance=False)
    # drop the query point itself; with duplicates it may not sit in column 0
    own = neigh == uniq[:, None]
    has_own = own.any(axis=1)
    drop = np.where(has_own, np.argmax(own, axis=1), k)
    keep = np.ones_like(neigh, dtype=bool)
    keep[np.arange(len(uniq)), drop] = False
    neigh = neigh[keep].reshape(len(uniq), k)

    x_i = pts[base]
    x_nn = pts[neigh[inv, pick]]
    synth = x_i + u[:, None] * (x_nn - x_i)
    return synth.reshape((n_new,) + minority.shape[1:])


def shuffle(X, y, seed: int = 0):
    if len(X) != len(y):
        raise DataError("X and y lengths differ")
    perm = make_rng(seed, "prep/shuffle").permutation(len(y))
    return X[perm], y[perm]


@dataclass
class SequenceBatch:
    windows: np.ndarray
    targets: np.ndarray

    @property
    def w(self) -> int:
        return self.windows.shape[1]

    def __len__(self) -> int:
        return len(self.targets)


def build_windows(X: np.ndarray, y: np.ndarray, w: int) -> SequenceBatch:
    """Stride-1 windows; window j covers rows [j, j+w) and targets y[j+w-1]."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if w < 1:
        raise ConfigError("window length must be >= 1")
    if X.shape[0] < w:
        raise DataError(f"{X.shape[0]} rows cannot form a window of length {w}")
    if len(y) != X.shape[0]:
        raise DataError("X and y lengths differ")
    view = sliding_window_view(X, w, axis=0).transpose(0, 2, 1)
    return SequenceBatch(view, y[w - 1 :])


@dataclass
class WindowSet:
    """Training units gathered on demand.

    Unit ``j < len(ends)`` is the real window ending at row ``ends[j]`` of
    ``rows``; later units are stored synthetic windows. ``order`` is the
    presentation order used for chunking.
    """

    rows: np.ndarray
    ends: np.ndarray
    targets: np.ndarray
    w: int
    synthetic: np.ndarray | None = None
    order: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.synthetic is None:
            self.synthetic = np.zeros((0, self.w, self.rows.shape[1]))
        if self.order is None:
            self.order = np.arange(len(self.targets))

    def __len__(self) -> int:
        return len(self.order)

    @property
    def n_real(self) -> int:
        return len(self.ends)

    def take_units(self, units: np.ndarray) -> SequenceBatch:
        units = np.asarray(units, dtype=np.int64)
        out = np.empty((len(units), self.w, self.rows.shape[1]))
        real = units < self.n_real
        if real.any():
            ends = self.ends[units[real]]
            out[real] = self.rows[ends[:, None] + np.arange(-self.w + 1, 1)]
        if (~real).any():
            out[~real] = self.synthetic[units[~real] - self.n_real]
        return SequenceBatch(out, self.targets[units])

    def take(self, start: int, stop: int) -> SequenceBatch:
        return self.take_units(self.order[start:stop])

    def materialize(self) -> SequenceBatch:
        return self.take(0, len(self))


@dataclass(frozen=True)
class Chunk:
    index: int
    start: int
    stop: int

    @property
    def size(self) -> int:
        return self.stop - self.start


def chunks(source, C: int) -> list[Chunk]:
    """Consecutive, non-overlapping runs of ``C`` units; the last may be short."""
    if C < 1:
        raise ConfigError("chunk size must be >= 1")
    n = len(source)
    return [Chunk(k, s, min(s + C, n)) for k, s in enumerate(range(0, n, C))]


def iter_batches(n: int, B: int) -> Iterator[slice]:
    for s in range(0, n, B):
        yield slice(s, min(s + B, n))


@dataclass
class Prepared:
    train: WindowSet
    val: WindowSet
    scaler: ScalerParams
    split: SplitIndices
    provenance: dict = field(default_factory=dict)


def window_ends(n_rows: int, w: int) -> np.ndarray:
    if n_rows < w:
        raise DataError(f"{n_rows} rows cannot form a window of length {w}")
    return np.arange(w - 1, n_rows)


def rows_covered(ends: np.ndarray, w: int) -> np.ndarray:
    mask = np.zeros(int(ends.max()) + 1 if ends.size else 0, dtype=bool)
    for k in range(w):
        mask[ends - k] = True
    return np.flatnonzero(mask)


def prepare(
    X: np.ndarray,
    y: np.ndarray,
    w: int,
    *,
    seed: int,
    ratio: float = 0.7,
    smote_k: int = 5,
    smote_on: str = "windows",
    scaler: ScalerParams | None = None,
) -> Prepared:
    """Split, scale, balance and order the training windows of one log.

    A given ``scaler`` (e.g. from a model being resumed) is used as is
    instead of being fitted.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int8)
    ends = window_ends(X.shape[0], w)
    targets = y[ends]
    split = stratified_split(targets, ratio, seed)
    train_ends, val_ends = ends[split.train], ends[split.validation]

    fit_rows = rows_covered(train_ends, w)
    if scaler is None:
        scaler = fit_scaler(X[fit_rows])
    Z = apply_scaler(X, scaler)
    Z.setflags(write=False)

    base = WindowSet(Z, train_ends, targets[split.train], w)
    if smote_on == "windows":
        # only minority windows are gathered; majority windows stay as row views
        t_train = targets[split.train]
        counts = np.bincount(t_train, minlength=2)
        need = int(counts.max() - counts.min())
        minority = int(np.argmin(counts))
        if need:
            pts = base.take_units(np.flatnonzero(t_train == minority)).windows
            synth = smote_synthetic(pts, need, smote_k, seed)
            del pts
        else:
            synth = np.zeros((0, w, X.shape[1]))
        all_targets = np.concatenate([t_train, np.full(need, minority, np.int8)])
    elif smote_on == "rows":
        # oversample the rows closing each training window, then window the
        # synthetic block as if it were a contiguous trace
        row_ids = train_ends
        counts = np.bincount(targets[split.train], minlength=2)
        need = int(counts.max() - counts.min())
        if need:
            minority = int(np.argmin(counts))
            pad = np.flatnonzero(targets[split.train] != minority)[: need + w - 1]
            src_X = np.concatenate([Z[row_ids], Z[row_ids[pad]]])
            src_y = np.concatenate([targets[split.train], targets[split.train][pad]])
            Xs, _ = smote(src_X, src_y, smote_k, seed)
            synth_rows = Xs[len(src_X) :][: need + w - 1]
            synth = build_windows(synth_rows, np.full(len(synth_rows), minority), w).windows[:need].copy()
            all_targets = np.concatenate([targets[split.train], np.full(need, minority, np.int8)])
        else:
            synth = np.zeros((0, w, X.shape[1]))
            all_targets = targets[split.train]
    else:
        raise ConfigError(f"smote_on must be 'windows' or 'rows', got {smote_on!r}")

    order = make_rng(seed, "prep/shuffle").permutation(len(all_targets))
    train = WindowSet(Z, train_ends, all_targets.astype(np.int8), w, synth, order)
    val = WindowSet(Z, val_ends, targets[split.validation], w)
    provenance = {
        "split_ratio": ratio,
        "smote_on": smote_on,
        "smote_k": smote_k,
        "train_window_ends": train_ends.tolist(),
        "validation_window_ends": val_ends.tolist(),
        "scaler_fit_rows": fit_rows.tolist(),
        "smote_input_units": "train",
        "n_train_real": int(len(train_ends)),
        "n_train_synthetic": int(len(synth)),
        "n_validation": int(len(val_ends)),
    }
    check_leakage(provenance, w)
    return Prepared(train, val, scaler, split, provenance)


def check_leakage(provenance: dict, w: int) -> None:
    """Scaler rows and SMOTE inputs must come from training windows only."""
    train_rows = rows_covered(np.asarray(provenance["train_window_ends"], dtype=np.int64), w)
    fit = np.asarray(provenance["scaler_fit_rows"], dtype=np.int64)
    if not np.isin(fit, train_rows).all():
        raise DataError("leakage: scaler fitted on rows outside the training windows")
    if provenance.get("smote_input_units") != "train":
        raise DataError("leakage: SMOTE input not restricted to the training partition")
    overlap = np.intersect1d(
        provenance["train_window_ends"], provenance["validation_window_ends"]
    )
    if overlap.size:
        raise DataError("leakage: a window is in both train and validation")
