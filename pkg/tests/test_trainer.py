import csv
import math

import numpy as np
import pytest

from tiilstm import trainer
from tiilstm.errors import ConfigError, DataError, NumericError
from tiilstm.prep import WindowSet
from tiilstm.trainer import (
    LOG_COLUMNS,
    TrainConfig,
    early_stop,
    release_chunk_memory,
    sample_resources,
    train_incremental,
)


def window_sets(n_train=2500, n_val=300, n=3, w=5, seed=0):
    rng = np.random.default_rng(seed)
    rows = rng.normal(size=(n_train + n_val + w, n))
    y_rows = (rows[:, 0] > 0).astype(np.int8)
    ends = np.arange(w - 1, len(rows))
    tr, va = ends[:n_train], ends[n_train : n_train + n_val]
    return WindowSet(rows, tr, y_rows[tr], w), WindowSet(rows, va, y_rows[va], w)


def test_early_stop_examples():
    assert early_stop([0.9] * 6, 5, 1e-4)
    assert not early_stop([0.9] * 5, 5, 1e-4)
    assert not any(early_stop(list(np.linspace(0, 1, k)), 5, 1e-4) for k in range(1, 30))
    assert early_stop([0.90, 0.9002, 0.90, 0.9001, 0.90, 0.9001], 5, 1e-3)
    with pytest.raises(ConfigError):
        early_stop([0.9], 0, 1e-4)


def test_config_round_trip_and_validation():
    cfg = TrainConfig(C=500, tau=0.7)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"chunk": 3})
    with pytest.raises(ConfigError):
        TrainConfig(tau=1.5)
    with pytest.raises(ConfigError):
        TrainConfig(smote_on="both")


def test_three_chunks_and_log_columns(tmp_path):
    train, val = window_sets()
    cfg = TrainConfig(C=1000, B=64, U=4, patience=50)
    _, _, rep = train_incremental(train, val, cfg)
    assert rep.total_chunks == 3 and len(rep.logs) == 3 and not rep.stopped_early
    assert rep.final_val_f1 == rep.logs[-1].val_f1
    rep.write_csv(tmp_path / "log.csv")
    with open(tmp_path / "log.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == LOG_COLUMNS and len(rows) == 4


def test_training_is_deterministic():
    train, val = window_sets(800)
    cfg = TrainConfig(C=300, U=4, patience=50)
    p1, _, r1 = train_incremental(train, val, cfg)
    p2, _, r2 = train_incremental(train, val, cfg)
    assert p1.equals(p2)
    assert r1.to_dict(include_resources=False) == r2.to_dict(include_resources=False)


def test_learns_separable_signal():
    train, val = window_sets(3000)
    _, _, rep = train_incremental(train, val, TrainConfig(C=1000, U=8, patience=50))
    assert rep.final_val_f1 > 0.9


def test_resume_continues():
    train, val = window_sets(1000)
    cfg = TrainConfig(C=500, U=4, patience=50)
    p, opt, _ = train_incremental(train, val, cfg)
    p2, opt2, _ = train_incremental(train, val, cfg, params=p, opt=opt)
    assert opt2.step == 2 * opt.step and not p2.equals(p)
    with pytest.raises(DataError):
        train_incremental(train, val, TrainConfig(U=8), params=p, opt=opt)


def test_constant_f1_stops_after_patience_plus_one(monkeypatch):
    train, val = window_sets(12000)
    calls = []

    def flat(params, v, tau):
        calls.append(1)
        return 0.8, 0.9, np.zeros(len(v))

    monkeypatch.setattr(trainer, "validate", flat)
    _, _, rep = train_incremental(train, val, TrainConfig(C=1000, U=4, patience=3))
    assert len(calls) == 4 and len(rep.logs) == 4 and rep.stopped_early
    assert rep.total_chunks == 12


def test_single_class_validation_is_rejected():
    train, val = window_sets(200)
    val = WindowSet(val.rows, val.ends, np.zeros_like(val.targets), val.w)
    with pytest.raises(DataError):
        train_incremental(train, val, TrainConfig(U=4))


def test_non_finite_loss_aborts():
    train, val = window_sets(200)
    train.rows[:] = np.nan
    with pytest.raises(NumericError, match="chunk 0"):
        train_incremental(train, val, TrainConfig(U=4))


def test_sample_resources():
    a = sample_resources()
    b = sample_resources()
    assert b.wall_clock >= a.wall_clock and a.rss_mb > 0


def test_rss_grows_with_allocation():
    before = sample_resources().rss_mb
    buf = np.ones(100 * 1024 * 1024 // 8)
    after = sample_resources().rss_mb
    assert after - before > 50
    del buf


def test_rss_sentinel_without_psutil(monkeypatch):
    import builtins

    real = builtins.__import__

    def fake(name, *a, **k):
        if name == "psutil":
            raise ImportError("no psutil here")
        return real(name, *a, **k)

    monkeypatch.setattr(builtins, "__import__", fake)
    monkeypatch.setattr(trainer, "_warned", False)
    with pytest.warns(UserWarning):
        assert sample_resources().rss_mb == -1.0


def test_release_chunk_memory():
    train, _ = window_sets(50)
    b = train.materialize()
    lst, dct = [1, 2], {"a": 1}
    release_chunk_memory(b, lst, dct)
    assert len(b.windows) == 0 and lst == [] and dct == {}
