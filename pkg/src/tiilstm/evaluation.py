"""Model training from a table, cross-dataset inference and parameter sweeps."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .dataio import TagMapping, TagTable, map_tags
from .errors import ConfigError, DataError
from .metrics import EvalReport, confusion, metrics, roc_auc
from .prep import Prepared, WindowSet, apply_scaler, prepare, window_ends
from .rng import derive_seed
from .rules import RuleConfig, derive_labels
from .tinylstm import (
    LstmParams,
    ModelArtifact,
    OptimizerState,
    classify,
    load_model,
    save_model,
)
from .trainer import TrainConfig, TrainReport, sample_resources, score_windows, train_incremental

logger = logging.getLogger(__name__)

SEED_STREAMS = ("prep/split", "prep/smote", "prep/shuffle", "tinylstm/init")


def table_labels(table: TagTable, rules: RuleConfig) -> np.ndarray:
    """Stored labels if the table has them, otherwise rule-derived ones."""
    if table.labels is not None:
        return np.asarray(table.labels, dtype=np.int8)
    return derive_labels(table, rules)


@dataclass
class TrainedModel:
    params: LstmParams
    optimizer: OptimizerState
    report: TrainReport
    prepared: Prepared
    blob: bytes
    train_time_s: float

    @property
    def artifact(self) -> ModelArtifact:
        return load_model(self.blob)


def train_model(
    table: TagTable,
    features,
    cfg: TrainConfig = TrainConfig(),
    rules: RuleConfig = RuleConfig(),
    *,
    labels: np.ndarray | None = None,
    created: str | None = None,
    resume: ModelArtifact | None = None,
    extra: dict | None = None,
) -> TrainedModel:
    """Prepare the selected columns of ``table`` and train chunk by chunk.

    ``features`` is a FeatureReport or a list of names. With ``resume`` the
    stored weights and optimizer moments are the starting point; the stored
    scaler is not refitted, so the resumed model keeps one input encoding.
    """
    t0 = time.monotonic()
    names = list(getattr(features, "selected", features))
    y = table_labels(table, rules) if labels is None else np.asarray(labels, dtype=np.int8)
    X = table.select(names).values
    params = opt = scaler = None
    if resume is not None:
        if resume.feature_names != names:
            raise DataError(
                f"resume model features {resume.feature_names} differ from requested {names}"
            )
        params, opt, scaler = resume.params, resume.optimizer, resume.scaler
        if opt is not None:
            opt = replace(opt, lr=cfg.lr)
    prepared = prepare(
        X, y, cfg.w, seed=cfg.seed, ratio=cfg.split_ratio, smote_k=cfg.smote_k,
        smote_on=cfg.smote_on, scaler=scaler,
    )
    params, opt, report = train_incremental(prepared.train, prepared.val, cfg, params=params, opt=opt)
    prov = dict(prepared.provenance)
    prov["train_report"] = report.to_dict(include_resources=False)
    if resume is not None:
        prov["resumed_from_step"] = resume.optimizer.step if resume.optimizer else 0
    doc_cfg = {
        "rule_config": rules.to_dict(),
        "train_config": cfg.to_dict(),
        "seeds": {"seed": cfg.seed, **{s: derive_seed(cfg.seed, s) for s in SEED_STREAMS}},
        "provenance": prov,
    }
    ex = dict(extra or {})
    if created is not None:
        ex["created"] = created
    blob = save_model(params, prepared.scaler, features, doc_cfg, optimizer=opt, extra=ex)
    return TrainedModel(params, opt, report, prepared, blob, time.monotonic() - t0)


def resolve_features(table: TagTable, names: Sequence[str], mapping: TagMapping | None) -> TagTable:
    """Bring ``table`` to canonical names; the result holds every column."""
    if mapping is not None:
        canon = {c for _, c in mapping.entries}
        missing = [n for n in names if n not in canon]
        if missing:
            raise DataError(f"model features not covered by the tag mapping: {missing}")
        table = map_tags(table, mapping)
    missing = [n for n in names if n not in table.names]
    if missing:
        raise DataError(f"model features missing from the data: {missing}")
    return table


@dataclass
class Scored:
    scores: np.ndarray
    targets: np.ndarray
    ends: np.ndarray
    rss_before_mb: float
    rss_after_mb: float
    inference_time_s: float


def score_table(
    model: ModelArtifact,
    table: TagTable,
    mapping: TagMapping | None = None,
    *,
    ends: np.ndarray | None = None,
    rules: RuleConfig | None = None,
) -> Scored:
    """Scale with the stored scaler, window with the stored w and score."""
    before = sample_resources()
    canon = resolve_features(table, model.feature_names, mapping)
    if rules is None:
        rc = model.doc.get("rule_config")
        rules = RuleConfig.from_dict(rc) if rc else RuleConfig()
    y = table_labels(canon, rules)
    X = canon.select(model.feature_names).values
    if X.shape[1] != model.params.n_features:
        raise DataError(
            f"model expects {model.params.n_features} features, data gives {X.shape[1]}"
        )
    Z = apply_scaler(X, model.scaler)
    w = model.window
    all_ends = window_ends(Z.shape[0], w)
    ends = all_ends if ends is None else np.asarray(ends, dtype=np.int64)
    if ends.size and (ends.min() < w - 1 or ends.max() >= Z.shape[0]):
        raise DataError("window ends outside the table")
    ws = WindowSet(Z, ends, y[ends], w)
    scores = score_windows(model.params, ws)
    after = sample_resources()
    return Scored(scores, ws.targets, ends, before.rss_mb, after.rss_mb, after.wall_clock - before.wall_clock)


def report_from_scores(scores, targets, tau: float) -> EvalReport:
    rep = metrics(confusion(classify(scores, tau), targets), tau)
    rep.roc_auc = roc_auc(scores, targets) if np.ptp(targets) > 0 else None
    if rep.roc_auc is None:
        rep.undefined = rep.undefined + ("roc_auc",)
    return rep


def evaluate(
    model: ModelArtifact,
    table: TagTable,
    mapping: TagMapping | None = None,
    tau: float | None = None,
    *,
    ends: np.ndarray | None = None,
) -> EvalReport:
    """Score a log with a trained model without retraining.

    ``tau`` defaults to the model's training threshold. The report's
    ``extra`` carries resident memory before/after inference and wall time.
    """
    tau = model.tau if tau is None else float(tau)
    if not 0.0 <= tau <= 1.0:
        raise ConfigError(f"tau must be in [0, 1], got {tau}")
    s = score_table(model, table, mapping, ends=ends)
    rep = report_from_scores(s.scores, s.targets, tau)
    rep.extra = {
        "n_windows": int(len(s.targets)),
        "positive_predictions": int(rep.cm.tp + rep.cm.fp),
        "rss_before_mb": s.rss_before_mb,
        "rss_after_mb": s.rss_after_mb,
        "inference_time_s": s.inference_time_s,
    }
    return rep


# ----------------------------------------------------------------- sweeps

SWEEP_KEYS = {"W": "w", "B": "B", "C": "C", "U": "U", "tau": "tau"}
FULL_GRID = {
    "W": [5, 10, 20],
    "B": [16, 32, 64, 128],
    "C": [500, 1000, 5000],
    "U": [16, 32, 64],
    "tau": [0.3, 0.5, 0.7, 0.9],
}
SWEEP_COLUMNS = (
    "parameter", "value", "baseline", "accuracy", "precision", "recall", "f1",
    "roc_auc", "positive_predictions", "rss_mb", "total_time_s",
)


@dataclass
class SweepResult:
    parameter: str
    value: float
    report: EvalReport
    rss_mb: float
    total_time_s: float
    baseline: bool = False
    weights_digest: str = ""

    def row(self) -> dict:
        r = self.report
        return {
            "parameter": self.parameter,
            "value": self.value,
            "baseline": self.baseline,
            "accuracy": r.accuracy,
            "precision": r.precision,
            "recall": r.recall,
            "f1": r.f1,
            "roc_auc": r.roc_auc,
            "positive_predictions": r.cm.tp + r.cm.fp,
            "rss_mb": self.rss_mb,
            "total_time_s": self.total_time_s,
        }


def check_grid(grid: dict) -> dict:
    bad = sorted(set(grid) - set(SWEEP_KEYS))
    if bad:
        raise ConfigError(f"unknown sweep parameters {bad}; valid keys: {sorted(SWEEP_KEYS)}")
    out = {}
    for k, vals in grid.items():
        if not isinstance(vals, (list, tuple)) or not vals:
            raise ConfigError(f"sweep values for {k!r} must be a non-empty list")
        out[k] = list(vals)
    return out


@dataclass
class _PointResult:
    scores: np.ndarray
    targets: np.ndarray
    rss_mb: float
    seconds: float
    digest: str


def _digest(params: LstmParams) -> str:
    import hashlib

    h = hashlib.blake2b(digest_size=16)
    for a in params.arrays():
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def _run_point(args) -> _PointResult:
    table, names, cfg, rules = args
    t0 = time.monotonic()
    tm = train_model(table, names, cfg, rules)
    val = tm.prepared.val
    scores = score_windows(tm.params, val)
    peak = max([l.rss_after_mb for l in tm.report.logs] + [l.rss_before_mb for l in tm.report.logs])
    peak = max(peak, sample_resources().rss_mb)
    return _PointResult(scores, val.targets, peak, time.monotonic() - t0, _digest(tm.params))


def sweep(
    table: TagTable,
    baseline: TrainConfig,
    grid: dict,
    features,
    rules: RuleConfig = RuleConfig(),
    *,
    jobs: int = 1,
) -> list[SweepResult]:
    """One-at-a-time sweep around ``baseline``.

    Every grid value yields one row scored on the held-out validation
    windows of its own training run. Values equal to the baseline reuse the
    single baseline run (flagged ``baseline``); ``tau`` rows re-threshold
    the baseline model's scores. An empty grid returns the baseline row only.
    """
    grid = check_grid(grid)
    names = list(getattr(features, "selected", features))
    points: dict[tuple, TrainConfig] = {("baseline", None): baseline}
    for key, vals in grid.items():
        if key == "tau":
            continue
        for v in vals:
            cfg = replace(baseline, **{SWEEP_KEYS[key]: type(getattr(baseline, SWEEP_KEYS[key]))(v)})
            if cfg != baseline:
                points[(key, v)] = cfg
    keys = list(points)
    args = [(table, names, points[k], rules) for k in keys]
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            done = list(pool.map(_run_point, args))
    else:
        done = [_run_point(a) for a in args]
    res = dict(zip(keys, done))
    base = res[("baseline", None)]

    def make(param, value, pr: _PointResult, tau, is_base, extra_time=0.0):
        t0 = time.monotonic()
        rep = report_from_scores(pr.scores, pr.targets, tau)
        return SweepResult(
            param, value, rep, pr.rss_mb, pr.seconds + extra_time + (time.monotonic() - t0),
            is_base, pr.digest,
        )

    rows: list[SweepResult] = []
    if not grid:
        return [make("baseline", float("nan"), base, baseline.tau, True)]
    for key, vals in grid.items():
        for v in vals:
            if key == "tau":
                rows.append(make("tau", float(v), base, float(v), float(v) == baseline.tau))
            else:
                pr = res.get((key, v), base)
                rows.append(make(key, v, pr, baseline.tau, (key, v) not in res))
    return rows


def write_sweep_csv(rows: list[SweepResult], path) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        out.writeheader()
        for r in rows:
            out.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.row().items()})
