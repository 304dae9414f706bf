import dataclasses
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hybriddetect.forest import (ForestModel, ForestParams, Tree, TrainingError, fit_forest,
                                 predict_proba, train_forest, undersample, window_features,
                                 window_targets)
from hybriddetect.reconstruction import WindowConfig, build_vocabulary, emit_windows
from hybriddetect.trace import GeneratorConfig, Label, generate_trace, label_map

from conftest import make_window


@lru_cache(maxsize=None)
def split_windows(sep: float, seed: int = 0, n: int = 20):
    gen = GeneratorConfig(n_benign=n, n_malicious=n, separability=sep, behavior_seed=seed)
    tr, trl = generate_trace(dataclasses.replace(gen, trace_seed=1000 + seed))
    te, tel = generate_trace(dataclasses.replace(gen, trace_seed=2000 + seed, first_pid=5000))
    vocab = build_vocabulary(tr)
    train = list(emit_windows(tr, WindowConfig(), vocab, label_map(trl)))
    test = list(emit_windows(te, WindowConfig(), vocab, label_map(tel)))
    return vocab, train, test


def accuracy(model, windows, vocab):
    p = model.predict_proba(window_features(windows, vocab.size))
    return float(((p >= 0.5) == window_targets(windows)).mean())


def test_two_windows_one_stump_separate_exactly():
    ws = [make_window([1, 1, 2], label=Label.BENIGN), make_window([3, 3, 4], label=Label.MALICIOUS)]
    X = window_features(ws, 8)
    m = fit_forest(X, window_targets(ws), ForestParams(n_trees=1, max_depth=1, min_leaf=1,
                                                     max_features=8),
                   bootstrap_indices=[np.array([0, 1])])
    assert list(m.predict_proba(X)) == [0.0, 1.0]
    assert m.trees[0].depth == 1


def test_stump_routes_left_to_zero():
    stump = Tree(np.array([0, -1, -1]), np.array([0.5, 0, 0]), np.array([1, -1, -1]),
                 np.array([2, -1, -1]), np.array([0.5, 0.0, 1.0]))
    m = ForestModel([stump], 2)
    assert predict_proba(m, np.array([0.1, 0.9])) == 0.0
    assert predict_proba(m, np.array([0.9, 0.1])) == 1.0
    doubled = ForestModel([stump, stump], 2)
    X = np.random.default_rng(0).random((20, 2))
    np.testing.assert_array_equal(m.predict_proba(X), doubled.predict_proba(X))
    with pytest.raises(ValueError):
        m.predict_proba(np.zeros((1, 3)))


def test_single_class_is_a_training_error():
    ws = [make_window([1, 2]), make_window([2, 3])]
    with pytest.raises(TrainingError):
        train_forest(ws, build_vocabulary([[(0, 0)]]))
    with pytest.raises(TrainingError):
        undersample(ws, 0)


def test_undersample_balances_without_replacement():
    ws = [make_window([i % 7 + 1], label=Label.BENIGN, index=i) for i in range(10)]
    ws += [make_window([1], label=Label.MALICIOUS, index=100 + i) for i in range(3)]
    out = undersample(ws, 4)
    assert sum(w.label is Label.MALICIOUS for w in out) == 3
    assert sum(w.label is Label.BENIGN for w in out) == 3
    assert len({w.window_index for w in out}) == 6
    assert out == undersample(ws, 4)


@given(st.integers(0, 2**31 - 1))
def test_probabilities_are_bounded(seed):
    rng = np.random.default_rng(seed)
    X = rng.random((30, 5))
    y = (X[:, 0] + 0.3 * rng.random(30) > 0.6).astype(float)
    y[:2] = [0, 1]
    m = fit_forest(X, y, ForestParams(n_trees=5, max_depth=4, seed=seed))
    p = m.predict_proba(rng.normal(size=(50, 5)) * 3)
    assert ((p >= 0) & (p <= 1)).all()
    assert all(t.depth <= 4 for t in m.trees)
    assert all(((t.value >= 0) & (t.value <= 1)).all() for t in m.trees)


def test_fixed_bootstraps_make_training_order_irrelevant():
    rng = np.random.default_rng(3)
    X = rng.random((40, 6))
    y = (X[:, 1] > 0.5).astype(float)
    params = ForestParams(n_trees=6, max_depth=5, seed=9)
    boots = [rng.integers(0, 40, 40) for _ in range(6)]
    perm = rng.permutation(40)
    inv = np.argsort(perm)
    a = fit_forest(X, y, params, boots)
    b = fit_forest(X[perm], y[perm], params, [inv[s] for s in boots])
    Q = rng.random((25, 6))
    np.testing.assert_array_equal(a.predict_proba(Q), b.predict_proba(Q))


def test_determinism_and_round_trip(tmp_path):
    vocab, train, test = split_windows(0.75)
    params = ForestParams(n_trees=10, seed=2)
    a = train_forest(train, vocab, params)
    b = train_forest(train, vocab, params)
    X = window_features(test, vocab.size)
    np.testing.assert_array_equal(a.predict_proba(X), b.predict_proba(X))
    assert a.dumps() == b.dumps()
    a.save(tmp_path / "f.json")
    c = ForestModel.load(tmp_path / "f.json")
    np.testing.assert_array_equal(a.predict_proba(X), c.predict_proba(X))
    assert c.vocabulary == vocab and c.dumps() == a.dumps()


def test_full_separability_is_learned():
    vocab, train, test = split_windows(1.0)
    assert accuracy(train_forest(train, vocab, ForestParams(n_trees=50)), test, vocab) >= 0.95


def test_zero_separability_is_chance():
    vocab, train, test = split_windows(0.0, n=40)
    acc = accuracy(train_forest(train, vocab, ForestParams(n_trees=50)), test, vocab)
    assert abs(acc - 0.5) <= 0.05


def test_accuracy_grows_with_separability():
    accs = []
    for sep in (0.0, 0.25, 0.5, 0.75, 1.0):
        vocab, train, test = split_windows(sep)
        accs.append(accuracy(train_forest(train, vocab, ForestParams(n_trees=30)), test, vocab))
    drops = [a - b for a, b in zip(accs, accs[1:]) if b < a]
    assert len(drops) <= 1 and all(d <= 0.01 for d in drops), accs


def test_more_trees_do_not_hurt():
    vocab, train, test = split_windows(0.75)
    one = accuracy(train_forest(train, vocab, ForestParams(n_trees=1)), test, vocab)
    many = accuracy(train_forest(train, vocab, ForestParams(n_trees=50)), test, vocab)
    assert many >= one - 0.01
