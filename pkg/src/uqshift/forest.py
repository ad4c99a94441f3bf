"""Random forest of Gini trees on binary fingerprints.

Every internal node tests a single bit: samples with the bit unset go
left, samples with it set go right.  Trees are grown on bootstrap
resamples, represented here as integer sample weights, and the forest
probability is the fraction of trees whose leaf majority is the
preferred class.
"""
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint
from .nn import as_xy, logit
from .seeding import make_rng
from .errors import InsufficientData

SCORE_CLAMP = 1e-6


@dataclass(frozen=True)
class ForestConfig:
    n_estimators: int = 100
    max_depth: int = 10000
    max_features: object = "sqrt"
    min_samples_leaf: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.n_estimators < 1:
            raise ValueError("n_estimators must be at least 1")
        if self.max_depth < 0:
            raise ValueError("max_depth must be non-negative")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be at least 1")

    def features_per_node(self, n_features):
        mf = self.max_features
        if mf is None or mf == "all":
            k = n_features
        elif mf == "sqrt":
            k = math.isqrt(n_features)
        elif isinstance(mf, float):
            k = int(mf * n_features)
        else:
            k = int(mf)
        return min(max(k, 1), n_features)

    def replace(self, **changes):
        return ForestConfig(**{**asdict(self), **changes})

    def to_mapping(self):
        return asdict(self)


def default_forest_grid(**fixed):
    axes = {
        "n_estimators": [50, 250, 500, 1000, 1500],
        "max_depth": [5, 20, 100, 10000],
    }
    for key in list(fixed):
        if key in axes:
            value = fixed.pop(key)
            axes[key] = list(value) if isinstance(value, (list, tuple)) else [value]
    return [
        ForestConfig(n_estimators=n, max_depth=d, **fixed)
        for n in axes["n_estimators"]
        for d in axes["max_depth"]
    ]


def _best_column(sub, y, w, min_samples_leaf):
    wy = w * y
    total = w.sum()
    pos = wy.sum()
    n_right = w @ sub
    pos_right = wy @ sub
    n_left = total - n_right
    pos_left = pos - pos_right
    ok = (n_left >= min_samples_leaf) & (n_right >= min_samples_leaf)
    if not ok.any():
        return None
    with np.errstate(invalid="ignore", divide="ignore"):
        purity = (
            (pos_left ** 2 + (n_left - pos_left) ** 2) / n_left
            + (pos_right ** 2 + (n_right - pos_right) ** 2) / n_right
        )
    purity = np.where(ok, purity, -np.inf)
    j = int(np.argmax(purity))
    parent = (pos ** 2 + (total - pos) ** 2) / total
    if not purity[j] - parent > 1e-12 * total:
        return None
    return j, (total - purity[j]) / total


def best_split(X, y, w, features, min_samples_leaf=1):
    """Pick the bit among ``features`` whose split minimises weighted Gini impurity.

    ``X`` holds the node's samples, ``w`` their (bootstrap) weights.  Returns
    ``(feature, child_impurity)`` or ``None`` when no admissible split
    lowers the impurity.  Exact ties go to the lowest bit index.
    """
    features = np.sort(np.asarray(features))
    w = np.asarray(w, dtype=np.float64)
    found = _best_column(np.asarray(X)[:, features], np.asarray(y, dtype=np.float64), w, min_samples_leaf)
    if found is None:
        return None
    return int(features[found[0]]), found[1]


@dataclass(frozen=True)
class DecisionTree:
    feature: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray
    depth: int

    @property
    def n_nodes(self):
        return len(self.feature)

    def apply(self, X):
        X = np.asarray(X)
        rows = np.arange(len(X))
        node = np.zeros(len(X), dtype=np.intp)
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return node
            bit = X[rows, np.where(inner, f, 0)]
            step = np.where(bit > 0, self.right[node], self.left[node])
            node = np.where(inner, step, node)

    def vote(self, X):
        c = self.counts[self.apply(X)]
        return (c[:, 1] > c[:, 0]).astype(np.int64)

    def to_mapping(self):
        return {
            "feature": checkpoint.encode_array(self.feature),
            "left": checkpoint.encode_array(self.left),
            "right": checkpoint.encode_array(self.right),
            "counts": checkpoint.encode_array(self.counts),
            "depth": self.depth,
        }

    @classmethod
    def from_mapping(cls, doc):
        return cls(
            checkpoint.decode_array(doc["feature"]),
            checkpoint.decode_array(doc["left"]),
            checkpoint.decode_array(doc["right"]),
            checkpoint.decode_array(doc["counts"]),
            doc["depth"],
        )


def grow_tree(X, y, w, config, rng):
    """Grow one tree depth-first on weighted samples."""
    d = X.shape[1]
    k = config.features_per_node(d)
    feature, left, right, counts = [], [], [], []
    max_depth_seen = 0
    stack = [(np.flatnonzero(w > 0), 0, None, None)]
    while stack:
        idx, depth, parent, side = stack.pop()
        node = len(feature)
        if parent is not None:
            (left if side == 0 else right)[parent] = node
        ww = w[idx]
        total = ww.sum()
        pos = ww @ y[idx]
        feature.append(-1)
        left.append(-1)
        right.append(-1)
        counts.append((total - pos, pos))
        max_depth_seen = max(max_depth_seen, depth)
        if pos == 0 or pos == total or depth >= config.max_depth or total < 2 * config.min_samples_leaf:
            continue
        feats = np.sort(rng.choice(d, size=k, replace=False))
        found = _best_column(X[np.ix_(idx, feats)], y[idx], ww, config.min_samples_leaf)
        if found is None:
            continue
        f = int(feats[found[0]])
        feature[node] = f
        on = X[idx, f] > 0
        # push right first so the left subtree is numbered first
        stack.append((idx[on], depth + 1, node, 1))
        stack.append((idx[~on], depth + 1, node, 0))
    return DecisionTree(
        np.array(feature, dtype=np.int64),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        np.array(counts, dtype=np.float64).reshape(-1, 2),
        max_depth_seen,
    )


@dataclass(frozen=True)
class TrainedForest:
    trees: tuple = field(repr=False)
    config: ForestConfig
    n_features: int
    single_class: bool = False

    def predict_proba(self, X):
        X = np.asarray(X)
        if X.ndim == 1:
            X = X[None, :]
        votes = np.zeros(len(X), dtype=np.int64)
        for tree in self.trees:
            votes += tree.vote(X)
        return votes / len(self.trees)

    def score(self, X):
        """Calibration score: logit of the vote ratio clamped to [1e-6, 1 - 1e-6]."""
        return logit(self.predict_proba(X), SCORE_CLAMP)

    def to_checkpoint(self):
        return checkpoint.dumps("forest", {
            "config": self.config.to_mapping(),
            "n_features": self.n_features,
            "single_class": self.single_class,
            "trees": [t.to_mapping() for t in self.trees],
        })

    @classmethod
    def from_checkpoint(cls, text):
        doc = checkpoint.loads(text, "forest")
        return cls(
            tuple(DecisionTree.from_mapping(t) for t in doc["trees"]),
            ForestConfig(**doc["config"]),
            doc["n_features"],
            doc["single_class"],
        )


def train_forest(train, config):
    """Fit ``config.n_estimators`` bootstrap trees.

    Tree ``i`` draws its bootstrap sample and feature subsets from a stream
    keyed by ``(config.seed, i)``.
    """
    X, y = as_xy(train, np.float64)
    if len(X) == 0:
        raise InsufficientData("cannot grow a forest on an empty training set")
    X = X.astype(np.uint8)
    single = bool(y.min() == y.max())
    if single:
        warnings.warn("training set has a single class; every tree is a constant leaf", stacklevel=2)
    n = len(X)
    trees = []
    for i in range(config.n_estimators):
        rng = make_rng(config.seed, i)
        w = np.bincount(rng.integers(0, n, size=n), minlength=n).astype(np.float64)
        trees.append(grow_tree(X, y, w, config, rng))
    return TrainedForest(tuple(trees), config, X.shape[1], single)


def predict_forest(forest, x):
    p = forest.predict_proba(x)
    return float(p[0]) if np.ndim(x) == 1 else p
