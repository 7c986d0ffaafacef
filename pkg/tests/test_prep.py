import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tiilstm.errors import ConfigError, DataError
from tiilstm.prep import (
    WindowSet,
    apply_scaler,
    build_windows,
    check_leakage,
    chunks,
    fit_scaler,
    invert_scaler,
    prepare,
    shuffle,
    smote,
    stratified_split,
)
from oracles import round_half_up

# frozen: (2 - 4) / sqrt(8/3)
SCALED_2 = -1.224744871391589


def test_split_counts():
    y = np.r_[np.ones(30), np.zeros(70)].astype(int)
    s = stratified_split(y, 0.7, 1)
    assert len(s.train) == 70 and y[s.train].sum() == 21
    assert set(s.train).isdisjoint(s.validation)
    t = stratified_split(y, 0.7, 1)
    np.testing.assert_array_equal(s.train, t.train)


def test_split_rounding():
    y = np.r_[np.ones(3), np.zeros(7)].astype(int)
    s = stratified_split(y, 0.7, 0)
    assert y[s.train].sum() == round_half_up(0.7 * 3) == 2


def test_split_errors():
    with pytest.raises(DataError):
        stratified_split(np.r_[1, np.zeros(9)], 0.7, 0)
    with pytest.raises(ConfigError):
        stratified_split(np.r_[1, 1, 0, 0], 1.0, 0)


def test_scaler_examples():
    p = fit_scaler(np.array([[2.0], [4.0], [6.0]]))
    assert p.mean[0] == 4.0 and p.std[0] == pytest.approx(np.sqrt(8 / 3), abs=1e-15)
    z = apply_scaler(np.array([[2.0], [4.0], [6.0]]), p)[:, 0]
    np.testing.assert_allclose(z, [SCALED_2, 0.0, -SCALED_2], atol=1e-15)
    c = fit_scaler(np.full((3, 1), 5.0))
    assert c.std[0] == 1.0
    np.testing.assert_array_equal(apply_scaler(np.full((3, 1), 5.0), c), 0.0)
    X = np.random.default_rng(0).normal(3, 7, (50, 4))
    np.testing.assert_allclose(invert_scaler(apply_scaler(X, fit_scaler(X)), fit_scaler(X)), X, atol=1e-9)
    with pytest.raises(DataError):
        fit_scaler(np.zeros((0, 3)))


def test_smote_segment():
    X = np.array([[0.0, 0.0], [1.0, 1.0]] + [[5.0, -5.0]] * 6)
    y = np.r_[1, 1, np.zeros(6)].astype(int)
    Xs, ys = smote(X, y, k=1, seed=3)
    new = Xs[len(X):]
    assert len(new) == 4 and (ys[len(X):] == 1).all()
    np.testing.assert_array_equal(new[:, 0], new[:, 1])
    assert ((new >= 0) & (new <= 1)).all()


def test_smote_balance_and_determinism():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(140, 3))
    y = np.r_[np.zeros(100), np.ones(40)].astype(int)
    Xs, ys = smote(X, y, 5, 9)
    assert (ys == 0).sum() == 100 and (ys == 1).sum() == 100
    Xt, _ = smote(X, y, 5, 9)
    np.testing.assert_array_equal(Xs, Xt)
    with pytest.raises(DataError):
        smote(X[:11], np.r_[1, np.zeros(10)].astype(int))


def test_smote_handles_duplicate_minority():
    X = np.array([[1.0, 1.0]] * 4 + [[0.0, 0.0]] * 10)
    y = np.r_[np.ones(4), np.zeros(10)].astype(int)
    Xs, _ = smote(X, y, 5, 0)
    np.testing.assert_array_equal(Xs[14:], 1.0)


def test_shuffle():
    X = np.arange(20).reshape(10, 2)
    y = np.arange(10)
    a, b = shuffle(X, y, 4)
    assert sorted(map(tuple, a)) == sorted(map(tuple, X))
    np.testing.assert_array_equal(a[:, 0] // 2, b)
    np.testing.assert_array_equal(shuffle(X, y, 4)[0], a)
    one = shuffle(X[:1], y[:1], 4)
    np.testing.assert_array_equal(one[0], X[:1])
    with pytest.raises(DataError):
        shuffle(X, y[:3])


def test_build_windows():
    X = np.arange(24.0).reshape(12, 2)
    b = build_windows(X, np.zeros(12), 5)
    assert len(b) == 8 and b.windows.shape == (8, 5, 2)
    np.testing.assert_array_equal(b.windows[3], X[3:8])
    one = build_windows(X, np.arange(12), 1)
    np.testing.assert_array_equal(one.targets, np.arange(12))
    last = build_windows(X[:5], np.array([0, 0, 0, 0, 1]), 5)
    assert len(last) == 1 and last.targets[0] == 1
    with pytest.raises(DataError):
        build_windows(X[:4], np.zeros(4), 5)


def test_chunks():
    sizes = [c.size for c in chunks(range(2500), 1000)]
    assert sizes == [1000, 1000, 500]
    assert len(chunks(range(30), 1000)) == 1


def _toy(n=400, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 3))
    y = (np.sin(np.arange(n) / 9.0) > 0.3).astype(int)
    X[:, 0] += 2 * y
    return X, y


@pytest.mark.parametrize("mode", ["windows", "rows"])
def test_prepare_properties(mode):
    X, y = _toy()
    w = 5
    p = prepare(X, y, w, seed=2, smote_on=mode)
    # balanced training set
    t = p.train.targets
    assert (t == 0).sum() == (t == 1).sum()
    # window count
    assert p.train.n_real + len(p.val) == len(X) - w + 1
    # scaler fitted on training rows only
    fit_rows = np.array(p.provenance["scaler_fit_rows"])
    Zfit = p.train.rows[fit_rows]
    assert np.abs(Zfit.mean(axis=0)).max() < 1e-9
    assert np.abs(Zfit.std(axis=0) - 1).max() < 1e-9
    # class fractions
    targets = y[w - 1 :]
    frac_train = p.train.targets[: p.train.n_real].mean()
    assert abs(frac_train - targets.mean()) <= 1 / p.train.n_real
    check_leakage(p.provenance, w)
    # deterministic
    q = prepare(X, y, w, seed=2, smote_on=mode)
    np.testing.assert_array_equal(p.train.materialize().windows, q.train.materialize().windows)


def test_leakage_guard_trips():
    X, y = _toy()
    p = prepare(X, y, 5, seed=0)
    covered = set(p.provenance["scaler_fit_rows"])
    outside = next(r for r in range(len(X)) if r not in covered)
    bad = dict(p.provenance, scaler_fit_rows=p.provenance["scaler_fit_rows"] + [outside])
    with pytest.raises(DataError, match="scaler"):
        check_leakage(bad, 5)
    both = dict(p.provenance)
    both["validation_window_ends"] = both["validation_window_ends"] + both["train_window_ends"][:1]
    with pytest.raises(DataError, match="both"):
        check_leakage(both, 5)


def test_window_set_take_matches_rows():
    X, y = _toy(60)
    ws = WindowSet(X, np.array([4, 10, 59]), np.array([0, 1, 0]), 5)
    b = ws.materialize()
    np.testing.assert_array_equal(b.windows[1], X[6:11])


@settings(max_examples=30, deadline=None)
@given(st.integers(20, 120), st.integers(1, 8), st.integers(0, 2**31))
def test_split_property(n, w, seed):
    y = (np.arange(n) % 3 == 0).astype(int)
    s = stratified_split(y, 0.7, seed)
    assert len(s.train) + len(s.validation) == n
    assert abs(y[s.train].mean() - y.mean()) <= 1 / len(s.train)
    assert len(build_windows(np.zeros((n, 2)), y, w)) == n - w + 1
