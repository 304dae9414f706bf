"""Random forest over per-window n-gram frequencies (the fast path).

Trees use axis-aligned splits chosen by Gini impurity reduction over a random
``sqrt(n_features)`` subset of features per node, each tree fit on a
bootstrap resample. Leaves store the malicious fraction of their samples and
a forest's probability is the mean leaf fraction across trees.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .reconstruction import CompressedWindow, Vocabulary, window_frequency
from .trace import Label

FORMAT_VERSION = 1


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 50
    max_depth: int = 12
    min_leaf: int = 2
    # None -> ceil(sqrt(n_features))
    max_features: int | None = None
    seed: int = 0


@dataclass
class Tree:
    """Flat array tree; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def depth(self) -> int:
        def walk(node):
            if self.feature[node] < 0:
                return 0
            return 1 + max(walk(self.left[node]), walk(self.right[node]))
        return walk(0)

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return node
            go_left = X[rows[inner], f[inner]] <= self.threshold[node[inner]]
            node[inner] = np.where(go_left, self.left[node[inner]], self.right[node[inner]])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_json(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("feature", "threshold", "left", "right", "value")}

    @classmethod
    def from_json(cls, d: dict) -> "Tree":
        return cls(
            feature=np.asarray(d["feature"], dtype=np.int64),
            threshold=np.asarray(d["threshold"], dtype=np.float64),
            left=np.asarray(d["left"], dtype=np.int64),
            right=np.asarray(d["right"], dtype=np.int64),
            value=np.asarray(d["value"], dtype=np.float64),
        )


@dataclass
class ForestModel:
    trees: list[Tree]
    n_features: int
    params: ForestParams = field(default_factory=ForestParams)
    vocabulary: Vocabulary | None = None

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        """Malicious probability for each row of ``X``."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features:
            raise ValueError(f"feature length {X.shape[1]} != model's {self.n_features}")
        return np.mean([t.predict(X) for t in self.trees], axis=0)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())

    def dumps(self) -> str:
        return json.dumps({
            "format": "forest",
            "version": FORMAT_VERSION,
            "params": asdict(self.params),
            "n_features": self.n_features,
            "vocabulary": None if self.vocabulary is None else self.vocabulary.to_json(),
            "trees": [t.to_json() for t in self.trees],
        })

    @classmethod
    def loads(cls, text: str) -> "ForestModel":
        d = json.loads(text)
        if d.get("format") != "forest" or d.get("version") != FORMAT_VERSION:
            raise ValueError("not a forest model file of a supported version")
        vocab = None if d["vocabulary"] is None else Vocabulary.from_json(d["vocabulary"])
        return cls([Tree.from_json(t) for t in d["trees"]], int(d["n_features"]),
                   ForestParams(**d["params"]), vocab)

    @classmethod
    def load(cls, path) -> "ForestModel":
        with open(path) as fh:
            return cls.loads(fh.read())


def _best_split(Xn: np.ndarray, yn: np.ndarray, features: np.ndarray, min_leaf: int):
    """Lowest weighted Gini split of the node among ``features``.

    Returns (feature, threshold, impurity) or None when no admissible split
    exists. Thresholds are midpoints between consecutive distinct values.
    """
    n = Xn.shape[0]
    vals = Xn[:, features]
    order = np.argsort(vals, axis=0, kind="stable")
    sv = np.take_along_axis(vals, order, axis=0)
    sy = yn[order]
    left_pos = np.cumsum(sy, axis=0)[:-1]
    n_left = np.arange(1, n, dtype=np.float64)[:, None]
    n_right = n - n_left
    right_pos = sy.sum(axis=0)[None, :] - left_pos
    pl = left_pos / n_left
    pr = right_pos / n_right
    gini = (n_left * 2 * pl * (1 - pl) + n_right * 2 * pr * (1 - pr)) / n
    ok = sv[1:] > sv[:-1]
    ok &= (n_left >= min_leaf) & (n_right >= min_leaf)
    if not ok.any():
        return None
    gini = np.where(ok, gini, np.inf)
    # first minimum in (feature, position) order
    flat = np.argmin(gini.T)
    j, i = divmod(int(flat), n - 1)
    thr = 0.5 * (sv[i, j] + sv[i + 1, j])
    return int(features[j]), float(thr), float(gini[i, j])


def fit_tree(X: np.ndarray, y: np.ndarray, sample: np.ndarray, max_depth: int,
             min_leaf: int, max_features: int, rng: np.random.Generator) -> Tree:
    feature, threshold, left, right, value = [], [], [], [], []
    n_features = X.shape[1]

    def new_node(idx):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(y[idx].mean()))
        return len(feature) - 1

    root = new_node(sample)
    stack = [(root, sample, 0)]
    while stack:
        node, idx, depth = stack.pop()
        yn = y[idx]
        p = yn.mean()
        parent_gini = 2 * p * (1 - p)
        if depth >= max_depth or parent_gini == 0.0 or len(idx) < 2 * min_leaf:
            continue
        feats = np.sort(rng.choice(n_features, size=max_features, replace=False))
        split = _best_split(X[idx], yn, feats, min_leaf)
        if split is None or split[2] >= parent_gini:
            continue
        f, thr, _ = split
        go_left = X[idx, f] <= thr
        li = new_node(idx[go_left])
        ri = new_node(idx[~go_left])
        feature[node], threshold[node], left[node], right[node] = f, thr, li, ri
        # right pushed first so the left subtree is numbered (and drawn) first
        stack.append((ri, idx[~go_left], depth + 1))
        stack.append((li, idx[go_left], depth + 1))
    return Tree(np.asarray(feature, dtype=np.int64), np.asarray(threshold),
                np.asarray(left, dtype=np.int64), np.asarray(right, dtype=np.int64),
                np.asarray(value))


def fit_forest(X: np.ndarray, y: np.ndarray, params: ForestParams = ForestParams(),
               bootstrap_indices: Sequence[np.ndarray] | None = None) -> ForestModel:
    """Fit a forest on a feature matrix and 0/1 labels (1 = malicious).

    ``bootstrap_indices`` overrides the per-tree resamples; feature subsets
    are still drawn from the seeded generator, independently of row order.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != y.shape[0] or X.shape[0] == 0:
        raise TrainingError("X must be a non-empty (n_samples, n_features) matrix matching y")
    if y.min() == y.max():
        raise TrainingError("training data contains a single class")
    n, d = X.shape
    mf = params.max_features or max(1, math.ceil(math.sqrt(d)))
    mf = min(mf, d)
    boot_rng = np.random.default_rng([params.seed, 1])
    feat_rng = np.random.default_rng([params.seed, 2])
    trees = []
    for k in range(params.n_trees):
        if bootstrap_indices is not None:
            sample = np.asarray(bootstrap_indices[k], dtype=np.int64)
        else:
            sample = boot_rng.integers(0, n, size=n)
        trees.append(fit_tree(X, y, sample, params.max_depth, params.min_leaf, mf, feat_rng))
    return ForestModel(trees, d, params)


def undersample(windows: Sequence, seed: int) -> list:
    """Drop majority-class windows (seeded, without replacement) to balance.

    Kept windows retain their original relative order.
    """
    mal = [i for i, w in enumerate(windows) if w.label is Label.MALICIOUS]
    ben = [i for i, w in enumerate(windows) if w.label is Label.BENIGN]
    if not mal or not ben:
        raise TrainingError("need at least one window of each class")
    rng = np.random.default_rng([seed, 3])
    if len(ben) > len(mal):
        ben = rng.choice(ben, size=len(mal), replace=False).tolist()
    elif len(mal) > len(ben):
        mal = rng.choice(mal, size=len(ben), replace=False).tolist()
    keep = sorted(mal + ben)
    return [windows[i] for i in keep]


def window_features(windows: Sequence[CompressedWindow], vocab_size: int) -> np.ndarray:
    return np.stack([window_frequency(w, vocab_size) for w in windows]) if windows else \
        np.zeros((0, vocab_size))


def window_targets(windows: Sequence[CompressedWindow]) -> np.ndarray:
    if any(w.label is None for w in windows):
        raise TrainingError("training windows must be labelled")
    return np.array([1.0 if w.label is Label.MALICIOUS else 0.0 for w in windows])


def train_forest(windows: Sequence[CompressedWindow], vocab: Vocabulary,
                 params: ForestParams = ForestParams(), balance: bool = True) -> ForestModel:
    """Under-sample to balance classes, then fit on window frequencies."""
    window_targets(windows)
    if balance:
        windows = undersample(windows, params.seed)
    X = window_features(windows, vocab.size)
    model = fit_forest(X, window_targets(windows), params)
    model.vocabulary = vocab
    return model


def predict_proba(model: ForestModel, feature: np.ndarray) -> float:
    """Malicious probability for one frequency feature vector."""
    feature = np.asarray(feature, dtype=np.float64)
    if feature.ndim != 1:
        raise ValueError("expected a single feature vector")
    return float(model.predict_proba(feature[None, :])[0])


def predict_window(model: ForestModel, window: CompressedWindow) -> float:
    return predict_proba(model, window_frequency(window, model.n_features))
