"""Chunk-by-chunk incremental training with resource logging."""

from __future__ import annotations

import csv
import gc
import logging
import math
import os
import time
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, NumericError
from .metrics import confusion, metrics, roc_auc
from .prep import WindowSet, chunks, iter_batches
from .tinylstm import (
    LstmParams,
    OptimizerState,
    adam_step,
    backward,
    classify,
    forward_batch,
    init_params,
)

logger = logging.getLogger(__name__)

LOG_COLUMNS = (
    "chunk_index",
    "train_loss",
    "val_f1",
    "val_roc_auc",
    "rss_before_mb",
    "rss_after_mb",
    "val_time_s",
)


@dataclass(frozen=True)
class TrainConfig:
    w: int = 5
    C: int = 1000
    B: int = 64
    U: int = 16
    tau: float = 0.5
    lr: float = 2e-2
    patience: int = 5
    plateau_epsilon: float = 1e-4
    seed: int = 0
    val_every: int = 1
    split_ratio: float = 0.7
    smote_k: int = 5
    smote_on: str = "windows"

    def __post_init__(self) -> None:
        for name in ("w", "C", "B", "U", "patience", "val_every", "smote_k"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError("tau must be in [0, 1]")
        if self.lr <= 0 or self.plateau_epsilon < 0:
            raise ConfigError("lr must be > 0 and plateau_epsilon >= 0")
        if self.smote_on not in ("windows", "rows"):
            raise ConfigError("smote_on must be 'windows' or 'rows'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown train config keys {unknown}; valid: {sorted(known)}")
        return cls(**doc)


@dataclass
class ChunkLog:
    chunk_index: int
    train_loss: float
    val_f1: float | None
    val_roc_auc: float | None
    rss_before_mb: float
    rss_after_mb: float
    val_time_s: float

    def row(self) -> list:
        return [
            "" if v is None else (repr(v) if isinstance(v, float) else v)
            for v in (getattr(self, c) for c in LOG_COLUMNS)
        ]


@dataclass
class TrainReport:
    logs: list[ChunkLog] = field(default_factory=list)
    stopped_early: bool = False
    stop_reason: str = ""
    total_chunks: int = 0
    final_val_f1: float | None = None
    final_val_roc_auc: float | None = None

    def to_dict(self, *, include_resources: bool = True) -> dict:
        logs = [asdict(l) for l in self.logs]
        if not include_resources:
            for l in logs:
                for k in ("rss_before_mb", "rss_after_mb", "val_time_s"):
                    l.pop(k)
        return {
            "logs": logs,
            "stopped_early": self.stopped_early,
            "stop_reason": self.stop_reason,
            "total_chunks": self.total_chunks,
            "chunks_processed": len(self.logs),
            "final_val_f1": self.final_val_f1,
            "final_val_roc_auc": self.final_val_roc_auc,
        }

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(LOG_COLUMNS)
            for log in self.logs:
                out.writerow(log.row())


@dataclass(frozen=True)
class ResourceSnapshot:
    rss_mb: float
    wall_clock: float


_warned = False


def sample_resources() -> ResourceSnapshot:
    """Resident set size via psutil (``/proc`` on Linux, task info on macOS,
    working set on Windows) and ``time.monotonic``; rss is -1 if unsupported.
    """
    global _warned
    try:
        import psutil

        rss = psutil.Process(os.getpid()).memory_info().rss / (1024.0 * 1024.0)
    except Exception as exc:  # noqa: BLE001 - sentinel contract, never raise
        if not _warned:
            warnings.warn(f"resident memory unavailable on this platform: {exc}")
            _warned = True
        rss = -1.0
    return ResourceSnapshot(rss, time.monotonic())


def release_chunk_memory(*buffers) -> None:
    """Empty per-chunk containers in place and collect garbage.

    Lists and dicts are cleared; objects exposing ``windows``/``targets``
    (a materialized chunk) have those arrays replaced by empty ones so the
    caller's remaining reference no longer pins the memory.
    """
    for buf in buffers:
        if isinstance(buf, (list, dict)):
            buf.clear()
        elif hasattr(buf, "windows") and hasattr(buf, "targets"):
            buf.windows = buf.windows[:0].copy()
            buf.targets = buf.targets[:0].copy()
    gc.collect()


def early_stop(history, patience: int, epsilon: float) -> bool:
    """True once the last patience+1 scores span at most ``epsilon``."""
    if patience < 1:
        raise ConfigError("patience must be >= 1")
    if len(history) < patience + 1:
        return False
    tail = np.asarray(history[-(patience + 1) :], dtype=np.float64)
    return bool(tail.max() - tail.min() <= epsilon)


def score_windows(params: LstmParams, source: WindowSet, batch_size: int = 2048) -> np.ndarray:
    out = np.empty(len(source))
    for s in range(0, len(source), batch_size):
        stop = min(s + batch_size, len(source))
        out[s:stop] = forward_batch(params, source.take(s, stop).windows)[0]
    return out


def validate(params: LstmParams, val: WindowSet, tau: float) -> tuple[float, float, np.ndarray]:
    scores = score_windows(params, val)
    f1 = metrics(confusion(classify(scores, tau), val.targets[val.order])).f1
    return f1, roc_auc(scores, val.targets[val.order]), scores


def train_incremental(
    train: WindowSet,
    val: WindowSet,
    cfg: TrainConfig,
    *,
    params: LstmParams | None = None,
    opt: OptimizerState | None = None,
    on_chunk=None,
) -> tuple[LstmParams, OptimizerState, TrainReport]:
    """One epoch of mini-batches per chunk, weights carried across chunks.

    Validation F1/ROC-AUC are computed after every ``cfg.val_every`` chunks
    (and after the last); training stops when the F1 history plateaus.
    Passing ``params``/``opt`` resumes from an earlier run.
    """
    yv = val.targets[val.order]
    if len(yv) == 0 or yv.min() == yv.max():
        raise DataError("validation set must contain both classes")
    specs = chunks(train, cfg.C)
    if not specs:
        raise DataError("no training windows")
    n_features = train.rows.shape[1]
    if params is None:
        params = init_params(n_features, cfg.U, cfg.seed)
    if params.n_features != n_features or params.units != cfg.U:
        raise DataError(
            f"model dims (n={params.n_features}, U={params.units}) do not match "
            f"data n={n_features} / config U={cfg.U}"
        )
    if opt is None:
        opt = OptimizerState.fresh(params, lr=cfg.lr)

    report = TrainReport(total_chunks=len(specs))
    history: list[float] = []
    for spec in specs:
        before = sample_resources()
        batch = train.take(spec.start, spec.stop)
        losses = []
        for sl in iter_batches(len(batch), cfg.B):
            _, cache = forward_batch(params, batch.windows[sl])
            loss, grads = backward(params, batch.targets[sl], cache)
            if not math.isfinite(loss):
                raise NumericError(
                    f"non-finite loss in chunk {spec.index}, batch starting {sl.start}"
                )
            params, opt = adam_step(params, grads, opt)
            losses.append(loss * (sl.stop - sl.start))
            del cache, grads
        release_chunk_memory(batch)
        del batch
        after = sample_resources()

        val_f1 = val_auc = None
        t0 = time.monotonic()
        last = spec.index == len(specs) - 1
        if (spec.index + 1) % cfg.val_every == 0 or last:
            val_f1, val_auc, _ = validate(params, val, cfg.tau)
            history.append(val_f1)
        val_time = time.monotonic() - t0
        log = ChunkLog(
            spec.index,
            float(np.sum(losses) / spec.size),
            val_f1,
            val_auc,
            after.rss_mb if before.rss_mb < 0 else before.rss_mb,
            after.rss_mb,
            val_time,
        )
        report.logs.append(log)
        logger.info(
            "chunk %d: loss=%.4f f1=%s auc=%s rss=%.1fMB",
            spec.index, log.train_loss, val_f1, val_auc, after.rss_mb,
        )
        if on_chunk is not None:
            on_chunk(log, params)
        if val_f1 is not None:
            report.final_val_f1, report.final_val_roc_auc = val_f1, val_auc
        if val_f1 is not None and early_stop(history, cfg.patience, cfg.plateau_epsilon):
            report.stopped_early = True
            report.stop_reason = (
                f"validation F1 within {cfg.plateau_epsilon} for {cfg.patience + 1} evaluations"
            )
            break
    if not report.stopped_early:
        report.stop_reason = "chunks exhausted"
    if report.final_val_f1 is None:
        report.final_val_f1, report.final_val_roc_auc, _ = validate(params, val, cfg.tau)
    return params, opt, report
