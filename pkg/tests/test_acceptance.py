"""Acceptance criteria 1-10; each test prints a single PASS/FAIL line."""

import json
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

import gradcheck
from oracles import auc_pairwise, pearson_def, vif_normal_equations
from tiilstm import trainer
from tiilstm.evaluation import evaluate, sweep, train_model
from tiilstm.featsel import pearson, select_features, vif
from tiilstm.metrics import ConfusionMatrix, metrics, roc_auc
from tiilstm.prep import check_leakage
from tiilstm.rules import derive_labels
from tiilstm.synthplant import CANONICAL, make_benchmark
from tiilstm.trainer import TrainConfig

HERE = Path(__file__).parent


@pytest.fixture
def emit(capsys):
    def _emit(n: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[criterion {n:2d}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail

    return _emit


@pytest.fixture(scope="module")
def baseline():
    t0 = time.monotonic()
    bm = make_benchmark("baseline", 0)
    y = derive_labels(bm.train)
    rep = select_features(bm.train, y, target=10, seed=0)
    tm = train_model(bm.train, rep, TrainConfig(), labels=y)
    return {"bm": bm, "labels": y, "features": rep, "model": tm, "seconds": time.monotonic() - t0}


def test_c01_gradient_check(emit):
    t0 = time.monotonic()
    worst = max(gradcheck.worst_relative_error(seed) for seed in range(20))
    dt = time.monotonic() - t0
    emit(1, worst < 1e-4 and dt < 10, f"20 instances, worst relative error {worst:.2e}, {dt:.1f} s")


REF_COUNTS = ConfusionMatrix(tp=13387, tn=16154, fp=342, fn=108)
REF_ROW = np.array([0.984, 0.973, 0.992, 0.983])  # reported accuracy/precision/recall/F1


@pytest.mark.xfail(
    strict=True,
    reason="precision of the reference counts is 13387/13729 = 0.97509, 0.00209 above the "
    "reported 0.973; no correct arithmetic meets the 0.002 tolerance for that column",
)
def test_c02_reference_confusion_counts(emit):
    r = metrics(REF_COUNTS)
    got = np.array([r.accuracy, r.precision, r.recall, r.f1])
    dev = np.abs(got - REF_ROW)
    emit(
        2, dev.max() <= 0.002,
        f"acc/prec/rec/f1 {np.round(got, 5).tolist()}, deviations {np.round(dev, 5).tolist()} (limit 0.002)",
    )


def test_c02_reference_counts_other_columns():
    r = metrics(REF_COUNTS)
    got = np.array([r.accuracy, r.precision, r.recall, r.f1])
    assert np.abs(got - REF_ROW)[[0, 2, 3]].max() <= 0.002
    assert [round(v, 5) for v in got] == [0.985, 0.97509, 0.992, 0.98347]


def test_c03_oracle_equivalence(emit):
    t0 = time.monotonic()
    rng = np.random.default_rng(2024)
    vif_err = 0.0
    for _ in range(50):
        X = rng.normal(size=(200, 6))
        X[:, 3] += 0.8 * X[:, 0]
        X[:, 5] += 0.5 * X[:, 1] - 0.5 * X[:, 2]
        got = np.array([e.vif for e in vif(X).entries])
        ref = np.array(vif_normal_equations([list(X[:, j]) for j in range(6)]))
        vif_err = max(vif_err, np.abs(got - ref).max())
    auc_err = 0.0
    for n in range(2, 201):
        y = rng.integers(0, 2, n)
        y[0], y[1] = 0, 1
        s = np.round(rng.random(n), 1)  # coarse grid forces ties
        auc_err = max(auc_err, abs(roc_auc(s, y) - auc_pairwise(s, y)))
    r_err = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 300))
        x, z = rng.normal(size=(2, n))
        z = z + rng.normal() * x
        r_err = max(r_err, abs(pearson(x, z) - pearson_def(list(x), list(z))))
    dt = time.monotonic() - t0
    ok = vif_err < 1e-8 and auc_err < 1e-12 and r_err < 1e-12 and dt < 30
    emit(3, ok, f"VIF {vif_err:.1e}, AUC {auc_err:.1e}, Pearson {r_err:.1e}, {dt:.1f} s")


def _pipeline_properties(prepared, X_rows: int, y_rows: np.ndarray, w: int) -> list[str]:
    bad = []
    t = prepared.train.targets
    if (t == 0).sum() != (t == 1).sum():
        bad.append("SMOTE output not balanced")
    fit_rows = np.asarray(prepared.provenance["scaler_fit_rows"])
    Z = prepared.train.rows[fit_rows]
    if np.abs(Z.mean(axis=0)).max() >= 1e-9 or np.abs(Z.std(axis=0) - 1).max() >= 1e-9:
        bad.append("scaled training columns not standardized")
    real = prepared.train.n_real
    global_frac = y_rows[w - 1 :].mean()
    if abs(t[:real].mean() - global_frac) > 1 / real:
        bad.append("split class fraction off")
    if real + len(prepared.val) != X_rows - w + 1:
        bad.append("window count != rows - w + 1")
    try:
        check_leakage(prepared.provenance, w)
    except Exception as exc:  # noqa: BLE001
        bad.append(str(exc))
    return bad


def test_c04_pipeline_properties(emit, baseline, small_model, small_bench):
    bad = []
    for tm, table in ((baseline["model"], baseline["bm"].train), (small_model, small_bench.train)):
        y = derive_labels(table)
        bad += _pipeline_properties(tm.prepared, table.n_rows, y, tm.artifact.window)
    rows_mode = train_model(small_bench.train, list(CANONICAL), TrainConfig(smote_on="rows"))
    bad += _pipeline_properties(rows_mode.prepared, small_bench.train.n_rows, derive_labels(small_bench.train), 5)
    emit(4, not bad, "balance, scaling, split, window count, leakage clean on 3 runs" if not bad else "; ".join(bad))


def test_c05_baseline_detection(emit, baseline):
    r = baseline["model"].report
    ok = r.final_val_f1 >= 0.95 and r.final_val_roc_auc >= 0.98 and baseline["seconds"] < 300
    emit(
        5, ok,
        f"held-out F1 {r.final_val_f1:.4f}, ROC-AUC {r.final_val_roc_auc:.4f}, "
        f"selected {baseline['features'].selected}, {baseline['seconds']:.0f} s",
    )


def test_c06_transfer(emit, baseline):
    bm = baseline["bm"]
    r = evaluate(baseline["model"].artifact, bm.eval, bm.mapping)
    emit(6, r.f1 >= 0.90 and r.precision >= 0.92, f"plant B F1 {r.f1:.4f}, precision {r.precision:.4f}")


def _memrun(n: int) -> dict:
    out = subprocess.run(
        [sys.executable, str(HERE / "helpers" / "memrun.py"), str(n)],
        check=True, capture_output=True, text=True,
    )
    return json.loads(out.stdout.strip().splitlines()[-1])


@pytest.mark.slow
def test_c07_bounded_memory(emit):
    small, large = _memrun(10_000), _memrun(50_000)
    growth = large["peak_mb"] / small["peak_mb"] - 1.0
    r = np.array(large["rss_after"])
    trend_ok = r[-5:].mean() <= r[:5].mean() * 1.2
    emit(
        7, growth < 0.20 and trend_ok,
        f"peak {small['peak_mb']:.1f} MB (10k) vs {large['peak_mb']:.1f} MB (50k), +{100 * growth:.1f}%; "
        f"rss_after first-5 {r[:5].mean():.1f} / last-5 {r[-5:].mean():.1f} MB over {large['chunks']} chunks",
    )


def test_c08_tau_sweep(emit, baseline):
    rows = sweep(baseline["bm"].train, TrainConfig(), {"tau": [0.3, 0.5, 0.7, 0.9]}, baseline["features"])
    rec = [r.report.recall for r in rows]
    pos = [r.row()["positive_predictions"] for r in rows]
    same = len({r.weights_digest for r in rows}) == 1
    mono = all(a >= b for a, b in zip(rec, rec[1:])) and all(a >= b for a, b in zip(pos, pos[1:]))
    emit(8, same and mono, f"recall {np.round(rec, 4).tolist()}, positives {pos}, one weight digest: {same}")


def _cli_pipeline(work: Path) -> dict:
    env = {k: v for k, v in os.environ.items() if k != "SOURCE_DATE_EPOCH"}

    def cli(*args):
        subprocess.run([sys.executable, "-m", "tiilstm", *map(str, args)], check=True, env=env, capture_output=True)

    d = work / "data"
    cli("synth", "--profile", "small", "--seed", "7", "--out", d)
    cli("label", d / "plant_a.csv", "--out", work / "labeled.csv", "--seed", "7")
    cli("select", work / "labeled.csv", "--out", work / "features.json", "--seed", "7")
    cli("train", work / "labeled.csv", "--features", work / "features.json", "--out", work / "model.json",
        "--log", work / "log.csv", "--seed", "7")
    cli("eval", work / "model.json", d / "plant_b.csv", "--mapping", d / "mapping_b.json",
        "--out", work / "metrics.json", "--scores", work / "scores.csv", "--seed", "7")
    metrics_doc = json.loads((work / "metrics.json").read_text())
    for k in ("rss_before_mb", "rss_after_mb", "inference_time_s"):
        metrics_doc.pop(k)
    return {
        "model": (work / "model.json").read_bytes(),
        "predictions": (work / "scores.csv").read_bytes(),
        "features": (work / "features.json").read_bytes(),
        "labels": (work / "labeled.csv").read_bytes(),
        "metrics": metrics_doc,
    }


@pytest.mark.slow
def test_c09_determinism(emit, tmp_path):
    a = _cli_pipeline(tmp_path / "a")
    b = _cli_pipeline(tmp_path / "b")
    diff = [k for k in a if a[k] != b[k]]
    emit(9, not diff, "model, predictions, metrics identical across two runs" if not diff else f"differs: {diff}")


def test_c10_early_stopping(emit, monkeypatch, small_bench):
    cfg = TrainConfig(C=200, patience=5)
    # a frozen model: with a negligible step size validation F1 never moves
    frozen = train_model(small_bench.train, list(CANONICAL), TrainConfig(C=200, patience=5, lr=1e-300))
    evals = [l.val_f1 for l in frozen.report.logs if l.val_f1 is not None]
    real_ok = len(evals) == cfg.patience + 1 and frozen.report.stopped_early

    calls = []

    def constant(params, val, tau):
        calls.append(1)
        return 0.75, 0.8, np.zeros(len(val))

    monkeypatch.setattr(trainer, "validate", constant)
    mocked = train_model(small_bench.train, list(CANONICAL), cfg)
    mock_ok = len(calls) == cfg.patience + 1 and len(mocked.report.logs) == cfg.patience + 1
    emit(
        10, real_ok and mock_ok,
        f"stopped after {len(evals)} (frozen weights) and {len(calls)} (constant F1) evaluations "
        f"of {mocked.report.total_chunks} chunks, patience {cfg.patience}",
    )
