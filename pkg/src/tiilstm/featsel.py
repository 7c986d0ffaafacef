"""Three-stage feature selection: Pearson filter, iterative VIF, RF-based RFE.

Each stage takes the survivors of the previous one. ``select_features`` runs
the whole chain and returns a :class:`FeatureReport` audit trail.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.ensemble import RandomForestClassifier

from .dataio import TagTable
from .errors import ConfigError, DataError
from .rng import derive_seed

logger = logging.getLogger(__name__)

R2_INF = 1.0 - 1e-12


def pearson(x, y) -> float:
    """Sample Pearson coefficient; 0 when either series is constant."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DataError(f"series must be 1-D and equal length, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise DataError("pearson needs at least 2 samples")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        return 0.0
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


@dataclass(frozen=True)
class CorrelationMatrix:
    names: tuple[str, ...]
    r: np.ndarray

    @classmethod
    def from_matrix(cls, X: np.ndarray, names: Sequence[str]) -> CorrelationMatrix:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[0] < 2:
            raise DataError("correlation needs at least 2 rows")
        D = X - X.mean(axis=0)
        ss = np.einsum("ij,ij->j", D, D)
        const = ss == 0.0
        scale = np.where(const, 1.0, np.sqrt(ss))
        Dn = D / scale
        r = Dn.T @ Dn
        r[const, :] = 0.0
        r[:, const] = 0.0
        r = np.clip(0.5 * (r + r.T), -1.0, 1.0)
        idx = np.flatnonzero(~const)
        r[idx, idx] = 1.0
        return cls(tuple(names), r)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["tag", *self.names])
            for name, row in zip(self.names, self.r):
                out.writerow([name, *(repr(float(v)) for v in row)])


@dataclass(frozen=True)
class Removal:
    name: str
    stage: int
    reason: str
    score: float | None = None

    def to_dict(self) -> dict:
        return {"name": self.name, "reason": self.reason, "score": _num(self.score)}


def _num(v):
    # JSON has no infinity
    if v is None:
        return None
    if math.isinf(v):
        return "inf"
    return float(v)


def correlation_filter(
    table: TagTable,
    labels,
    threshold: float = 0.9,
    *,
    min_keep: int = 1,
) -> tuple[list[str], list[Removal]]:
    """Drop one member of every pair with |r| > threshold.

    Pairs are visited by decreasing |r|; the member with the lower absolute
    point-biserial correlation to ``labels`` goes (ties: the name sorting
    later). Removing a column does not change other pairwise r values, so one
    ordered pass reaches the fixed point.
    """
    if not 0.0 < threshold <= 1.0:
        raise ConfigError(f"correlation threshold must be in (0, 1], got {threshold}")
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != (table.n_rows,):
        raise DataError("labels length differs from table rows")
    cm = CorrelationMatrix.from_matrix(table.values, table.names)
    relevance = {n: abs(pearson(table.values[:, j], y)) for j, n in enumerate(table.names)}

    iu, ju = np.triu_indices(len(table.names), k=1)
    strength = np.abs(cm.r[iu, ju])
    hit = strength > threshold
    pairs = sorted(
        zip(strength[hit], iu[hit], ju[hit]),
        key=lambda p: (-p[0], table.names[p[1]], table.names[p[2]]),
    )
    alive = set(table.names)
    removed: list[Removal] = []
    for s, i, j in pairs:
        a, b = table.names[i], table.names[j]
        if a not in alive or b not in alive or len(alive) <= min_keep:
            continue
        ka, kb = (relevance[a], a), (relevance[b], b)
        # lower relevance loses; on equal relevance the later name loses
        loser, keeper = (a, b) if (ka[0] < kb[0] or (ka[0] == kb[0] and a > b)) else (b, a)
        alive.discard(loser)
        removed.append(
            Removal(
                loser,
                1,
                f"|r|={s:.6f} with {keeper} > {threshold}; "
                f"label relevance {relevance[loser]:.6f} <= {relevance[keeper]:.6f}",
                float(s),
            )
        )
    survivors = [n for n in table.names if n in alive]
    return survivors, removed


@dataclass(frozen=True)
class VifEntry:
    name: str
    vif: float
    r2: float
    round: int = 0

    def to_dict(self) -> dict:
        return {"name": self.name, "vif": _num(self.vif), "r2": float(self.r2), "round": self.round}


@dataclass
class VifReport:
    entries: list[VifEntry] = field(default_factory=list)

    def __getitem__(self, name: str) -> VifEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def vifs(self) -> dict[str, float]:
        return {e.name: e.vif for e in self.entries}


def _r2(target: np.ndarray, others: np.ndarray) -> float:
    dy = target - target.mean()
    sst = float(dy @ dy)
    if sst == 0.0:
        return 1.0  # a constant is explained by the intercept alone
    if others.shape[1] == 0:
        return 0.0
    A = others - others.mean(axis=0)  # centring absorbs the intercept
    beta = np.linalg.pinv(A) @ dy
    resid = dy - A @ beta
    return 1.0 - float(resid @ resid) / sst


def vif(table: TagTable | np.ndarray, names: Sequence[str] | None = None, *, round_: int = 0) -> VifReport:
    """Variance inflation of each column against all the others (with intercept)."""
    if isinstance(table, TagTable):
        X, names = table.values, table.names
    else:
        X = np.asarray(table, dtype=np.float64)
        names = names or tuple(f"x{j}" for j in range(X.shape[1]))
    n, p = X.shape
    if p < 2:
        raise DataError("VIF needs at least 2 features")
    if n <= p:
        raise DataError(f"VIF needs more rows than features ({n} rows, {p} features)")
    report = VifReport()
    for j in range(p):
        r2 = _r2(X[:, j], np.delete(X, j, axis=1))
        v = math.inf if r2 >= R2_INF else 1.0 / (1.0 - r2)
        report.entries.append(VifEntry(names[j], v, r2, round_))
    return report


def vif_filter(
    table: TagTable,
    threshold: float = 10.0,
    *,
    min_keep: int = 2,
) -> tuple[list[str], list[VifReport], list[Removal]]:
    """Remove the highest-VIF feature while any VIF exceeds ``threshold``.

    Constant columns are removed together in round 0. Ties on the maximum
    are broken by name. Stops early rather than leave fewer than
    ``min_keep`` (at least 2) features.
    """
    if threshold < 1.0:
        raise ConfigError(f"VIF threshold must be >= 1, got {threshold}")
    min_keep = max(2, min_keep)
    names = list(table.names)
    X = table.values
    trail: list[VifReport] = []
    removed: list[Removal] = []

    const = [n for j, n in enumerate(names) if np.ptp(X[:, j]) == 0.0]
    for n in const[: max(0, len(names) - min_keep)]:
        removed.append(Removal(n, 2, "constant column (VIF undefined)", math.inf))
        names.remove(n)

    rnd = 0
    while len(names) >= 2:
        sub = table.select(names)
        rep = vif(sub, round_=rnd)
        trail.append(rep)
        worst = max(rep.entries, key=lambda e: (e.vif, _neg(e.name)))
        if not worst.vif > threshold:
            break
        if len(names) <= min_keep:
            logger.warning("VIF filter stopped at %d features with VIF %s > %s", len(names), worst.vif, threshold)
            break
        removed.append(Removal(worst.name, 2, f"VIF={worst.vif:.6g} > {threshold} (R2={worst.r2:.12f})", worst.vif))
        names.remove(worst.name)
        rnd += 1
    return names, trail, removed


def _neg(name: str) -> tuple:
    # max() with this key prefers the name sorting first
    return tuple(-ord(c) for c in name)


@dataclass(frozen=True)
class ImportanceRanking:
    names: tuple[str, ...]
    importance: np.ndarray

    def as_dict(self) -> dict[str, float]:
        return {n: float(v) for n, v in zip(self.names, self.importance)}

    def weakest(self) -> str:
        """Lowest importance; equal scores resolve to the name sorting first."""
        return min(zip(self.importance, self.names))[1]


def _check_xy(X, y) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise DataError("X must be 2-D with one label per row")
    if X.shape[0] < 2:
        raise DataError("random forest needs at least 2 rows")
    if np.unique(y).size < 2:
        raise DataError("random forest needs both classes in y")
    return X, y


def train_random_forest(
    X,
    y,
    n_trees: int = 200,
    seed: int = 0,
    *,
    names: Sequence[str] | None = None,
    n_jobs: int | None = None,
) -> tuple[RandomForestClassifier, ImportanceRanking]:
    """Balanced-class Gini forest and its normalized impurity importances."""
    X, y = _check_xy(X, y)
    forest = RandomForestClassifier(
        n_estimators=n_trees,
        criterion="gini",
        max_features="sqrt",
        min_samples_split=2,
        class_weight="balanced",
        bootstrap=True,
        random_state=derive_seed(seed, "featsel/forest") % 2**32,
        n_jobs=n_jobs,
    )
    forest.fit(X, y)
    names = tuple(names) if names is not None else tuple(f"x{j}" for j in range(X.shape[1]))
    return forest, ImportanceRanking(names, np.asarray(forest.feature_importances_, dtype=np.float64))


@dataclass
class RfeRound:
    round: int
    dropped: str
    ranking: dict[str, float]


def rfe(
    X,
    y,
    target: int = 10,
    seed: int = 0,
    *,
    names: Sequence[str] | None = None,
    n_trees: int = 200,
    n_jobs: int | None = None,
) -> tuple[list[str], list[RfeRound]]:
    """Retrain a forest and drop its weakest feature until ``target`` remain."""
    X, y = _check_xy(X, y)
    names = list(names) if names is not None else [f"x{j}" for j in range(X.shape[1])]
    if not 1 <= target <= len(names):
        raise ConfigError(f"RFE target {target} must be in [1, {len(names)}]")
    cols = {n: X[:, j] for j, n in enumerate(names)}
    rounds: list[RfeRound] = []
    k = 0
    while len(names) > target:
        sub = np.column_stack([cols[n] for n in names])
        _, rank = train_random_forest(
            sub, y, n_trees, derive_seed(seed, f"featsel/rfe/{k}"), names=names, n_jobs=n_jobs
        )
        drop = rank.weakest()
        rounds.append(RfeRound(k, drop, rank.as_dict()))
        logger.info("RFE round %d: drop %s (importance %.6f)", k, drop, rank.as_dict()[drop])
        names.remove(drop)
        k += 1
    return names, rounds


@dataclass
class FeatureReport:
    inputs: list[str]
    stage1_removed: list[Removal]
    stage2_removed: list[Removal]
    stage3_removed: list[Removal]
    selected: list[str]
    target_count: int
    thresholds: dict = field(default_factory=dict)
    vif_trail: list[VifReport] = field(default_factory=list)
    rfe_rounds: list[RfeRound] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "inputs": list(self.inputs),
            "stage1_removed": [r.to_dict() for r in self.stage1_removed],
            "stage2_removed": [r.to_dict() for r in self.stage2_removed],
            "stage3_removed": [r.to_dict() for r in self.stage3_removed],
            "selected": list(self.selected),
            "target_count": self.target_count,
            "thresholds": dict(self.thresholds),
            "vif_trail": [[e.to_dict() for e in rep.entries] for rep in self.vif_trail],
            "rfe_rounds": [
                {"round": r.round, "dropped": r.dropped, "importance": r.ranking}
                for r in self.rfe_rounds
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, doc: dict) -> FeatureReport:
        try:
            def rem(stage):
                return [
                    Removal(r["name"], stage, r["reason"], _parse_num(r.get("score")))
                    for r in doc[f"stage{stage}_removed"]
                ]

            return cls(
                list(doc["inputs"]),
                rem(1),
                rem(2),
                rem(3),
                list(doc["selected"]),
                int(doc["target_count"]),
                dict(doc.get("thresholds", {})),
            )
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed feature report: missing {exc}") from exc

    @classmethod
    def read(cls, path: str | Path) -> FeatureReport:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(doc)

    def check_partition(self) -> None:
        groups = [r.name for r in self.stage1_removed + self.stage2_removed + self.stage3_removed]
        groups += list(self.selected)
        if sorted(groups) != sorted(self.inputs) or len(set(groups)) != len(groups):
            raise DataError("feature report stages do not partition the input tags")
        if len(self.selected) != self.target_count:
            raise DataError(f"{len(self.selected)} selected, target {self.target_count}")


def _parse_num(v):
    if v == "inf":
        return math.inf
    return None if v is None else float(v)


def select_features(
    table: TagTable,
    labels,
    *,
    target: int = 10,
    corr_threshold: float = 0.9,
    vif_threshold: float = 10.0,
    n_trees: int = 200,
    seed: int = 0,
    n_jobs: int | None = None,
) -> FeatureReport:
    """Run all three stages; filters never cut below ``target`` survivors."""
    names = list(table.names)
    if not 1 <= target <= len(names):
        raise ConfigError(f"target {target} must be in [1, {len(names)}] for a {len(names)}-tag table")
    y = np.asarray(labels)
    s1, rem1 = correlation_filter(table, y, corr_threshold, min_keep=target)
    logger.info("stage 1 kept %d of %d", len(s1), len(names))
    if len(s1) >= 2:
        s2, trail, rem2 = vif_filter(table.select(s1), vif_threshold, min_keep=target)
    else:
        s2, trail, rem2 = s1, [], []
    logger.info("stage 2 kept %d", len(s2))
    sub = table.select(s2)
    s3, rounds = rfe(sub.values, y, target, seed, names=s2, n_trees=n_trees, n_jobs=n_jobs)
    rem3 = [
        Removal(r.dropped, 3, f"lowest forest importance {r.ranking[r.dropped]:.6g} in round {r.round}", r.ranking[r.dropped])
        for r in rounds
    ]
    report = FeatureReport(
        names,
        rem1,
        rem2,
        rem3,
        s3,
        target,
        {"correlation": corr_threshold, "vif": vif_threshold, "n_trees": n_trees, "seed": seed},
        trail,
        rounds,
    )
    report.check_partition()
    return report
