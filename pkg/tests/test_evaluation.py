import numpy as np
import pytest

from tiilstm.dataio import TagMapping, map_tags
from tiilstm.errors import ConfigError, DataError
from tiilstm.evaluation import (
    FULL_GRID,
    check_grid,
    evaluate,
    report_from_scores,
    score_table,
    sweep,
    train_model,
    write_sweep_csv,
)
from tiilstm.prep import check_leakage
from tiilstm.synthplant import CANONICAL
from tiilstm.trainer import TrainConfig


def test_artifact_records_config(small_model):
    m = small_model.artifact
    assert m.feature_names == list(CANONICAL)
    assert m.doc["created"] == "1970-01-01T00:00:00Z"
    seeds = m.doc["seeds"]
    assert seeds["seed"] == 0 and "prep/split" in seeds
    check_leakage(m.doc["provenance"], m.window)


def test_evaluate_reproduces_validation_metrics(small_model, small_bench):
    m = small_model.artifact
    val = small_model.prepared.val
    rep = evaluate(m, small_bench.train, ends=val.ends)
    assert rep.f1 == small_model.report.final_val_f1
    assert rep.roc_auc == small_model.report.final_val_roc_auc
    for k in ("rss_before_mb", "rss_after_mb", "inference_time_s", "n_windows"):
        assert k in rep.extra


def test_transfer_without_retraining(small_model, small_bench):
    m = small_model.artifact
    rep = evaluate(m, small_bench.eval, small_bench.mapping)
    assert rep.extra["n_windows"] == small_bench.eval.n_rows - m.window + 1
    assert rep.f1 > 0.7
    with pytest.raises(DataError):
        evaluate(m, small_bench.eval)


def test_names_already_match(small_model, small_bench):
    m = small_model.artifact
    canon = map_tags(small_bench.eval, small_bench.mapping)
    a = evaluate(m, canon)
    b = evaluate(m, small_bench.eval, small_bench.mapping)
    assert a.f1 == b.f1


def test_missing_feature_named(small_model, small_bench):
    m = small_model.artifact
    entries = tuple(e for e in small_bench.mapping.entries if e[1] != "AIT202")
    with pytest.raises(DataError, match="AIT202"):
        evaluate(m, small_bench.eval, TagMapping(entries))


def test_tau_override(small_model, small_bench):
    m = small_model.artifact
    lo = evaluate(m, small_bench.eval, small_bench.mapping, tau=0.1)
    hi = evaluate(m, small_bench.eval, small_bench.mapping, tau=0.9)
    assert lo.extra["positive_predictions"] >= hi.extra["positive_predictions"]
    assert lo.recall >= hi.recall
    with pytest.raises(ConfigError):
        evaluate(m, small_bench.eval, small_bench.mapping, tau=2.0)


def test_resume_keeps_scaler(small_model, small_bench):
    m = small_model.artifact
    cont = train_model(small_bench.train, list(CANONICAL), resume=m)
    a = cont.artifact
    np.testing.assert_array_equal(a.scaler.mean, m.scaler.mean)
    assert a.optimizer.step > m.optimizer.step
    assert a.doc["provenance"]["resumed_from_step"] == m.optimizer.step


def test_check_grid():
    with pytest.raises(ConfigError, match="valid keys"):
        check_grid({"dropout": [0.1]})
    with pytest.raises(ConfigError):
        check_grid({"W": []})
    assert sum(len(v) for v in FULL_GRID.values()) == 17


def test_tau_sweep_reuses_one_model(small_bench, tmp_path):
    rows = sweep(small_bench.train, TrainConfig(), {"tau": [0.3, 0.5, 0.7, 0.9]}, list(CANONICAL))
    assert len(rows) == 4
    assert len({r.weights_digest for r in rows}) == 1
    rec = [r.report.recall for r in rows]
    pos = [r.row()["positive_predictions"] for r in rows]
    assert rec == sorted(rec, reverse=True) and pos == sorted(pos, reverse=True)
    assert [r.baseline for r in rows] == [False, True, False, False]
    write_sweep_csv(rows, tmp_path / "s.csv")
    assert len((tmp_path / "s.csv").read_text().splitlines()) == 5


def test_empty_grid_is_baseline_only(small_bench):
    rows = sweep(small_bench.train, TrainConfig(), {}, list(CANONICAL))
    assert len(rows) == 1 and rows[0].baseline


def test_sweep_point_baseline_reuse(small_bench):
    rows = sweep(small_bench.train, TrainConfig(), {"U": [8, 16]}, list(CANONICAL))
    assert [r.baseline for r in rows] == [False, True]
    assert rows[0].weights_digest != rows[1].weights_digest


def test_report_from_scores_single_class():
    rep = report_from_scores(np.array([0.2, 0.7]), np.array([1, 1]), 0.5)
    assert rep.roc_auc is None and "roc_auc" in rep.undefined
