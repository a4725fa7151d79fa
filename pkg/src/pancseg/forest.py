"""Binary random forest grown from scratch (bagged CART trees, Gini splits).

Randomness: tree ``t`` draws from ``SplitMix64(derive_seed(seed, "tree", t))``.
It first draws the bootstrap sample (``N`` bounded integers), then for each
node in preorder the ``features_per_split`` candidate features (partial
Fisher-Yates). Trees are therefore independent of the order they are grown
in, and any implementation following these rules reproduces the same model.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional

import numba
import numpy as np

from .errors import (
    DataError,
    DimensionMismatchError,
    ModelFormatError,
    NonFiniteError,
    SingleClassError,
    VersionMismatchError,
)
from .rng import SplitMix64, derive_seed

MODEL_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    n_trees: int = 50
    max_depth: Optional[int] = None
    min_leaf: int = 5
    features_per_split: Optional[int] = None  # None -> ceil(sqrt(d))
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise DataError("n_trees must be >= 1")
        if self.min_leaf < 1:
            raise DataError("min_leaf must be >= 1")
        if self.max_depth is not None and self.max_depth < 1:
            raise DataError("max_depth must be >= 1 or None")

    def mtry(self, d: int) -> int:
        k = self.features_per_split if self.features_per_split is not None else math.ceil(math.sqrt(d))
        if not 1 <= k <= d:
            raise DataError(f"features_per_split={k} must lie in [1, {d}]")
        return k

    def with_seed(self, seed: int) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), "seed": int(seed)})


@dataclass
class Tree:
    """Preorder node arrays; ``feature == -1`` marks a leaf holding ``value``."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return int(self.feature.size)


@dataclass
class ForestModel:
    trees: List[Tree]
    feature_count: int
    config: dict

    def predict_proba(self, X) -> np.ndarray:
        return predict_proba(self, X)


@numba.njit(cache=True, nogil=True)
def _best_split(Xn, yn, min_leaf):
    """Best Gini split over the columns of ``Xn``.

    Columns are scanned in order and thresholds ascending; only a strictly
    better score replaces the incumbent, so ties keep the lowest column and
    lowest threshold. Returns (column, threshold, gain); column -1 if none.
    """
    n, k = Xn.shape
    total_pos = 0.0
    for i in range(n):
        total_pos += yn[i]
    parent = (total_pos * total_pos + (n - total_pos) * (n - total_pos)) / n
    best_col = -1
    best_thr = 0.0
    best_score = -1.0
    for c in range(k):
        col = Xn[:, c]
        order = np.argsort(col, kind="mergesort")
        pos_left = 0.0
        for i in range(n - 1):
            j = order[i]
            pos_left += yn[j]
            nl = i + 1
            if nl < min_leaf:
                continue
            nr = n - nl
            if nr < min_leaf:
                break
            v0 = col[j]
            v1 = col[order[i + 1]]
            if not v0 < v1:
                continue
            pos_right = total_pos - pos_left
            score = (pos_left * pos_left + (nl - pos_left) * (nl - pos_left)) / nl + (
                pos_right * pos_right + (nr - pos_right) * (nr - pos_right)
            ) / nr
            if score > best_score:
                best_score = score
                best_col = c
                thr = 0.5 * (v0 + v1)
                if not thr < v1:
                    thr = v0
                best_thr = thr
    return best_col, best_thr, (best_score - parent) / n


def _grow_tree(X, y, cfg: TrainConfig, tree_index: int, mtry: int) -> Tree:
    stream = SplitMix64(derive_seed(cfg.seed, "tree", tree_index))
    n, d = X.shape
    rows = stream.integers(n, n) if cfg.bootstrap else np.arange(n)
    yf = y.astype(np.float64)

    feature, threshold, left, right, value = [], [], [], [], []
    # nodes are numbered when popped; pushing right before left yields preorder
    stack = [(rows, 0, -1, None)]
    while stack:
        idx, depth, parent, side = stack.pop()
        node = len(feature)
        if side == "l":
            left[parent] = node
        elif side == "r":
            right[parent] = node
        yn = yf[idx]
        n_node = idx.size
        pos = yn.sum()
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(pos / n_node))
        if (
            pos == 0
            or pos == n_node
            or n_node < 2 * cfg.min_leaf
            or (cfg.max_depth is not None and depth >= cfg.max_depth)
        ):
            continue
        feats = np.sort(stream.choice(d, mtry))
        col, thr, _gain = _best_split(np.ascontiguousarray(X[np.ix_(idx, feats)]), yn, cfg.min_leaf)
        if col < 0:
            continue
        f = int(feats[col])
        go_left = X[idx, f] <= thr
        feature[node] = f
        threshold[node] = float(thr)
        stack.append((idx[~go_left], depth + 1, node, "r"))
        stack.append((idx[go_left], depth + 1, node, "l"))

    return Tree(
        np.array(feature, dtype=np.int64),
        np.array(threshold, dtype=np.float64),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        np.array(value, dtype=np.float64),
    )


def _validate_xy(X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DataError("X must be a non-empty 2D matrix")
    if y.shape != (X.shape[0],):
        raise DimensionMismatchError("y must have one label per row of X")
    if X.shape[0] < 2:
        raise DataError("need at least two samples")
    if not np.all(np.isfinite(X)):
        raise NonFiniteError("feature matrix contains non-finite values")
    if not np.isin(y, (0, 1)).all():
        raise DataError("labels must be 0 or 1")
    y = y.astype(np.int8)
    if y.min() == y.max():
        raise SingleClassError("training labels contain a single class")
    return np.ascontiguousarray(X), y


def train_forest(X, y, cfg: TrainConfig = TrainConfig(), workers: int = 1) -> ForestModel:
    """Grow ``cfg.n_trees`` bagged Gini trees; deterministic in (X, y, cfg)."""
    X, y = _validate_xy(X, y)
    mtry = cfg.mtry(X.shape[1])
    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            trees = list(pool.map(lambda t: _grow_tree(X, y, cfg, t, mtry), range(cfg.n_trees)))
    else:
        trees = [_grow_tree(X, y, cfg, t, mtry) for t in range(cfg.n_trees)]
    return ForestModel(trees, X.shape[1], asdict(cfg))


@numba.njit(cache=True, nogil=True)
def _predict_tree(X, feature, threshold, left, right, value, out):
    for i in range(X.shape[0]):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = value[node]


def predict_trees(model: ForestModel, X) -> np.ndarray:
    """Per-tree leaf posteriors, shape ``(n, n_trees)``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != model.feature_count:
        raise DimensionMismatchError(f"expected {model.feature_count} features, got {X.shape[1]}")
    if not np.all(np.isfinite(X)):
        raise NonFiniteError("feature matrix contains non-finite values")
    X = np.ascontiguousarray(X)
    out = np.empty((X.shape[0], len(model.trees)))
    col = np.empty(X.shape[0])
    for t, tree in enumerate(model.trees):
        _predict_tree(X, tree.feature, tree.threshold, tree.left, tree.right, tree.value, col)
        out[:, t] = col
    return out


def predict_proba(model: ForestModel, X):
    """Mean leaf posterior over trees; scalar for a single vector, array for a matrix."""
    single = np.ndim(X) == 1
    p = predict_trees(model, X).mean(axis=1)
    return float(p[0]) if single else p


def subsample_negatives(y, ratio: float, seed: int) -> np.ndarray:
    """Row indices keeping every positive and at most ``ratio`` negatives per positive.

    Kept negatives are the first draws of a seeded shuffle; the returned
    indices are sorted.
    """
    y = np.asarray(y)
    pos = np.flatnonzero(y == 1)
    neg = np.flatnonzero(y == 0)
    cap = int(math.floor(ratio * pos.size))
    if ratio <= 0 or neg.size <= cap:
        return np.sort(np.concatenate([pos, neg]))
    picked = neg[SplitMix64(seed).choice(neg.size, cap)]
    return np.sort(np.concatenate([pos, picked]))


# --- serialization ---------------------------------------------------------


def tree_to_nodes(tree: Tree) -> list:
    nodes = []
    for i in range(tree.n_nodes):
        if tree.feature[i] < 0:
            nodes.append({"leaf": float(tree.value[i])})
        else:
            nodes.append(
                {"f": int(tree.feature[i]), "t": float(tree.threshold[i]), "l": int(tree.left[i]), "r": int(tree.right[i])}
            )
    return nodes


def tree_from_nodes(nodes: list, feature_count: int) -> Tree:
    n = len(nodes)
    if n == 0:
        raise ModelFormatError("tree has no nodes")
    feature = np.full(n, -1, dtype=np.int64)
    threshold = np.zeros(n)
    left = np.full(n, -1, dtype=np.int64)
    right = np.full(n, -1, dtype=np.int64)
    value = np.zeros(n)
    for i, node in enumerate(nodes):
        if "leaf" in node:
            p = float(node["leaf"])
            if not 0.0 <= p <= 1.0:
                raise ModelFormatError(f"leaf posterior {p} outside [0, 1]")
            value[i] = p
            continue
        f, l, r = int(node["f"]), int(node["l"]), int(node["r"])
        if not 0 <= f < feature_count:
            raise ModelFormatError(f"feature index {f} out of range")
        if not (i < l < n and i < r < n):
            raise ModelFormatError("child pointers must refer to later nodes")
        feature[i], threshold[i], left[i], right[i] = f, float(node["t"]), l, r
    return Tree(feature, threshold, left, right, value)


def model_to_dict(model: ForestModel) -> dict:
    return {
        "version": MODEL_VERSION,
        "feature_count": model.feature_count,
        "config": model.config,
        "trees": [{"nodes": tree_to_nodes(t)} for t in model.trees],
    }


def model_from_dict(doc: dict) -> ForestModel:
    if not isinstance(doc, dict):
        raise ModelFormatError("model document must be an object")
    if doc.get("version") != MODEL_VERSION:
        raise VersionMismatchError(f"unsupported model version {doc.get('version')!r}")
    try:
        d = int(doc["feature_count"])
        trees = [tree_from_nodes(t["nodes"], d) for t in doc["trees"]]
        config = dict(doc.get("config", {}))
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"malformed model document ({exc})") from exc
    if not trees:
        raise ModelFormatError("model has no trees")
    return ForestModel(trees, d, config)


def dumps_model(model: ForestModel) -> str:
    return json.dumps(model_to_dict(model), separators=(",", ":"), sort_keys=True) + "\n"


def save_model(path, model: ForestModel) -> None:
    Path(path).write_text(dumps_model(model))


def load_model(path) -> ForestModel:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: cannot parse model ({exc})") from exc
    return model_from_dict(doc)
