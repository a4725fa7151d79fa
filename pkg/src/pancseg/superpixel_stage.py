"""Superpixel-level features, overlap labelling, the C2/C3 cascade and stacking.

Superpixel feature layout (24 slots)::

    [0..3]   intensity mean, std, skewness, excess kurtosis
    [4..10]  intensity percentiles 20, 30, 40, 60, 70, 80, 90
    [11]     intensity median
    [12..23] the same twelve statistics of the C1 response
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    DataError,
    DegenerateCascadeError,
    EmptySuperpixelError,
    MissingFeaturesError,
    ModelFormatError,
    SingleClassError,
    VersionMismatchError,
)
from .forest import (
    ForestModel,
    Tree,
    TrainConfig,
    model_from_dict,
    model_to_dict,
    predict_proba,
    subsample_negatives,
    train_forest,
)
from .rng import derive_seed
from .volumes import BinaryMask, CtVolume, LabelVolume

PERCENTILES = (20, 30, 40, 60, 70, 80, 90)
N_SP_FEATURES = 24
_STAT_NAMES = ["mean", "std", "skew", "kurt"] + [f"p{p}" for p in PERCENTILES] + ["median"]
SP_FEATURE_NAMES = [f"i_{n}" for n in _STAT_NAMES] + [f"r_{n}" for n in _STAT_NAMES]
CASCADE_VERSION = 1


class OverlapLabel(Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    AMBIGUOUS = "ambiguous"

    @classmethod
    def from_ratio(cls, r: float, pos_min: float = 0.5, neg_max: float = 0.2) -> "OverlapLabel":
        if r >= pos_min:
            return cls.POSITIVE
        if r <= neg_max:
            return cls.NEGATIVE
        return cls.AMBIGUOUS


# --- response maps ----------------------------------------------------------


def build_response_map(shape: Tuple[int, int], ys, xs, probs, body_slice: Optional[np.ndarray] = None) -> np.ndarray:
    """Nearest-grid-centre interpolation of C1 probabilities over one slice.

    Ties between equidistant centres go to the centre first in (y, x) order.
    Pixels outside ``body_slice`` are 0, as is the whole map when there are
    no centres.
    """
    ny, nx = shape
    out = np.zeros(shape)
    ys, xs, probs = np.asarray(ys), np.asarray(xs), np.asarray(probs, dtype=np.float64)
    if ys.size == 0:
        return out
    order = np.lexsort((xs, ys))
    ys, xs, probs = ys[order], xs[order], probs[order]
    tree = cKDTree(np.column_stack([ys, xs]).astype(np.float64))
    gy, gx = np.mgrid[0:ny, 0:nx]
    pts = np.column_stack([gy.ravel(), gx.ravel()]).astype(np.float64)
    k = min(8, ys.size)
    dist, idx = tree.query(pts, k=k)
    if k == 1:
        dist, idx = dist[:, None], idx[:, None]
    # among (near-)equidistant neighbours pick the smallest index, i.e. lowest (y, x)
    d2 = (ys[idx] - pts[:, :1]) ** 2 + (xs[idx] - pts[:, 1:]) ** 2
    best = d2.min(axis=1, keepdims=True)
    cand = np.where(d2 == best, idx, np.iinfo(np.int64).max)
    nearest = cand.min(axis=1)
    out = probs[nearest].reshape(shape)
    if body_slice is not None:
        out = np.where(body_slice, out, 0.0)
    return out


# --- labelling --------------------------------------------------------------


def superpixel_overlap_ratio(sp_pixels: np.ndarray, gt: np.ndarray) -> float:
    """|sp ∩ gt| / |sp| for a boolean pixel mask of one superpixel."""
    sp_pixels = np.asarray(sp_pixels, dtype=bool)
    n = int(sp_pixels.sum())
    if n == 0:
        raise EmptySuperpixelError("superpixel has no pixels")
    return float(np.count_nonzero(sp_pixels & np.asarray(gt, dtype=bool))) / n


def slice_overlap_ratios(labels: np.ndarray, gt_slice: np.ndarray) -> np.ndarray:
    """Overlap ratio of every label in one slice, indexed by label."""
    flat = labels.ravel().astype(np.int64)
    size = np.bincount(flat)
    inside = np.bincount(flat, weights=gt_slice.ravel().astype(np.float64), minlength=size.size)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(size > 0, inside / np.maximum(size, 1), 0.0)


# --- features ---------------------------------------------------------------


def distribution_stats(values: np.ndarray) -> np.ndarray:
    """Twelve statistics of one unordered sample, in layout order."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    n = v.size
    if n == 0:
        raise EmptySuperpixelError("superpixel has no pixels")
    out = np.empty(12)
    mean = v.mean()
    if v[0] == v[-1]:
        out[0], out[1], out[2], out[3] = v[0], 0.0, 0.0, 0.0
    else:
        d = v - mean
        m2 = np.mean(d * d)
        m3 = np.mean(d * d * d)
        m4 = np.mean(d * d * d * d)
        out[0] = mean
        out[1] = math.sqrt(m2)
        out[2] = m3 / m2**1.5 if m2 > 0 else 0.0
        out[3] = m4 / (m2 * m2) - 3.0 if m2 > 0 else 0.0
    for j, p in enumerate(PERCENTILES + (50,)):
        out[4 + j] = _percentile_sorted(v, p)
    return out


def _percentile_sorted(v: np.ndarray, p: float) -> float:
    rank = p / 100.0 * (v.size - 1)
    lo = int(math.floor(rank))
    hi = int(math.ceil(rank))
    frac = rank - lo
    return float(v[lo] + (v[hi] - v[lo]) * frac)


def superpixel_features(sp_pixels, intensity: np.ndarray, response: np.ndarray) -> np.ndarray:
    """24-vector for the pixels selected by boolean mask ``sp_pixels``."""
    sel = np.asarray(sp_pixels, dtype=bool)
    if not sel.any():
        raise EmptySuperpixelError("superpixel has no pixels")
    return np.concatenate([distribution_stats(intensity[sel]), distribution_stats(response[sel])])


def slice_superpixel_features(labels: np.ndarray, intensity: np.ndarray, response: np.ndarray) -> np.ndarray:
    """Features for every label of one slice, row ``k`` for label ``k``."""
    flat = labels.ravel().astype(np.int64)
    order = np.argsort(flat, kind="stable")
    bounds = np.searchsorted(flat[order], np.arange(flat.max() + 2))
    iv = intensity.ravel()[order]
    rv = response.ravel()[order]
    K = flat.max() + 1
    out = np.zeros((K, N_SP_FEATURES))
    for k in range(K):
        a, b = bounds[k], bounds[k + 1]
        if a == b:
            raise EmptySuperpixelError(f"label {k} has no pixels")
        out[k, :12] = distribution_stats(iv[a:b])
        out[k, 12:] = distribution_stats(rv[a:b])
    return out


@dataclass
class SuperpixelTable:
    """Flat per-superpixel records for one volume."""

    z: np.ndarray
    label: np.ndarray
    size: np.ndarray
    in_body: np.ndarray  # every pixel of the superpixel lies in the body
    X: np.ndarray
    ratio: Optional[np.ndarray] = None

    def __len__(self):
        return int(self.z.size)

    def overlap_labels(self) -> np.ndarray:
        if self.ratio is None:
            raise DataError("no ground truth attached")
        return np.array([OverlapLabel.from_ratio(r).value for r in self.ratio])

    def as_dict(self) -> Dict[Tuple[int, int], np.ndarray]:
        return {(int(z), int(l)): self.X[i] for i, (z, l) in enumerate(zip(self.z, self.label))}


def volume_superpixel_table(
    vol: CtVolume, sp: LabelVolume, response: np.ndarray, body: BinaryMask, gt: Optional[BinaryMask] = None
) -> SuperpixelTable:
    zs, labs, sizes, inb, feats, ratios = [], [], [], [], [], []
    for z in range(vol.data.shape[0]):
        labels = sp.data[z].astype(np.int64)
        K = int(labels.max()) + 1
        size = np.bincount(labels.ravel(), minlength=K)
        in_body_count = np.bincount(labels.ravel(), weights=body.data[z].ravel().astype(float), minlength=K)
        feats.append(slice_superpixel_features(labels, vol.data[z].astype(np.float64), response[z]))
        zs.append(np.full(K, z))
        labs.append(np.arange(K))
        sizes.append(size)
        inb.append(in_body_count == size)
        if gt is not None:
            ratios.append(slice_overlap_ratios(labels, gt.data[z]))
    return SuperpixelTable(
        np.concatenate(zs),
        np.concatenate(labs),
        np.concatenate(sizes),
        np.concatenate(inb),
        np.vstack(feats),
        np.concatenate(ratios) if gt is not None else None,
    )


# --- cascade ------------------------------------------------------------------


@dataclass
class CascadeModel:
    c2: ForestModel
    c3: ForestModel
    t2: float
    t3: float = 0.5

    def scores(self, X) -> Tuple[np.ndarray, np.ndarray]:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return predict_proba(self.c2, X), predict_proba(self.c3, X)

    def decide(self, X, t2: Optional[float] = None, t3: Optional[float] = None) -> np.ndarray:
        s2, s3 = self.scores(X)
        t2 = self.t2 if t2 is None else t2
        t3 = self.t3 if t3 is None else t3
        return (s2 >= t2) & (s3 >= t3)

    def to_dict(self) -> dict:
        return {"version": CASCADE_VERSION, "t2": self.t2, "t3": self.t3, "c2": model_to_dict(self.c2), "c3": model_to_dict(self.c3)}

    @classmethod
    def from_dict(cls, doc: dict) -> "CascadeModel":
        if not isinstance(doc, dict):
            raise ModelFormatError("cascade document must be an object")
        if doc.get("version") != CASCADE_VERSION:
            raise VersionMismatchError(f"unsupported cascade version {doc.get('version')!r}")
        try:
            model = cls(model_from_dict(doc["c2"]), model_from_dict(doc["c3"]), float(doc["t2"]), float(doc["t3"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelFormatError(f"malformed cascade document ({exc})") from exc
        for name, f in (("c2", model.c2), ("c3", model.c3)):
            if f.feature_count != N_SP_FEATURES:
                raise ModelFormatError(f"{name} must take {N_SP_FEATURES} features")
        return model

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), separators=(",", ":"), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "CascadeModel":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ModelFormatError(f"{path}: cannot parse cascade ({exc})") from exc
        return cls.from_dict(doc)


def sensitivity_threshold(scores: np.ndarray, target: float = 0.99) -> float:
    """Largest t with fraction(scores >= t) >= target."""
    s = np.sort(np.asarray(scores, dtype=np.float64))[::-1]
    k = int(math.ceil(target * s.size))
    return float(s[max(k, 1) - 1])


def _accept_all_forest() -> ForestModel:
    leaf = Tree(np.array([-1]), np.zeros(1), np.array([-1]), np.array([-1]), np.ones(1))
    return ForestModel([leaf], N_SP_FEATURES, {"note": "constant-accept stage"})


def train_cascade(
    features,
    labels: Sequence,
    cfg: TrainConfig = TrainConfig(),
    c3_cfg: Optional[TrainConfig] = None,
    neg_ratio: float = 5.0,
    sensitivity: float = 0.99,
    t3: float = 0.5,
    strict: bool = False,
    workers: int = 1,
) -> CascadeModel:
    """Train C2 on all labelled superpixels and C3 on positives vs C2's hard negatives.

    ``labels`` holds :class:`OverlapLabel` values (or their strings);
    ambiguous rows are dropped. If C2 already rejects every negative at its
    threshold, C3 becomes a constant-accept stage unless ``strict`` is set,
    in which case :class:`DegenerateCascadeError` is raised.
    """
    X = np.asarray(features, dtype=np.float64)
    lab = np.array([OverlapLabel(l).value if not isinstance(l, OverlapLabel) else l.value for l in labels])
    if X.ndim != 2 or X.shape[0] != lab.size:
        raise DataError("one label per feature row is required")
    keep = lab != OverlapLabel.AMBIGUOUS.value
    X, y = X[keep], (lab[keep] == OverlapLabel.POSITIVE.value).astype(np.int8)
    if y.size == 0 or y.min() == y.max():
        raise SingleClassError("cascade training needs both positive and negative superpixels")

    rows = subsample_negatives(y, neg_ratio, derive_seed(cfg.seed, "c2-subsample"))
    c2 = train_forest(X[rows], y[rows], cfg.with_seed(derive_seed(cfg.seed, "c2")), workers)
    s2 = predict_proba(c2, X)
    t2 = sensitivity_threshold(s2[y == 1], sensitivity)

    hard = (y == 0) & (s2 >= t2)
    if not hard.any():
        if strict:
            raise DegenerateCascadeError(
                "no hard negatives survive C2; lower the C2 sensitivity target to train C3"
            )
        return CascadeModel(c2, _accept_all_forest(), t2, t3)
    rows3 = np.flatnonzero((y == 1) | hard)
    c3_cfg = cfg if c3_cfg is None else c3_cfg
    c3 = train_forest(X[rows3], y[rows3], c3_cfg.with_seed(derive_seed(cfg.seed, "c3")), workers)
    return CascadeModel(c2, c3, t2, t3)


def classify_and_stack(
    vol: CtVolume,
    sp: LabelVolume,
    features,
    cascade: CascadeModel,
    eligible: Optional[Dict[Tuple[int, int], bool]] = None,
    t2: Optional[float] = None,
    t3: Optional[float] = None,
) -> BinaryMask:
    """Set every pixel of each accepted superpixel; slices are independent.

    ``features`` maps ``(z, label)`` to a 24-vector, or is a
    :class:`SuperpixelTable`. Superpixels marked not eligible are rejected.
    """
    if isinstance(features, SuperpixelTable):
        table = features
        eligible = {(int(z), int(l)): bool(b) for z, l, b in zip(table.z, table.label, table.in_body)}
        features = table.as_dict()
    out = np.zeros(sp.data.shape, dtype=bool)
    for z in range(sp.data.shape[0]):
        labels = sp.data[z].astype(np.int64)
        K = int(labels.max()) + 1
        try:
            Xz = np.vstack([features[(z, k)] for k in range(K)])
        except KeyError as exc:
            raise MissingFeaturesError(f"no features for superpixel {exc.args[0]}") from exc
        accept = cascade.decide(Xz, t2, t3)
        if eligible is not None:
            accept &= np.array([eligible.get((z, k), False) for k in range(K)])
        out[z] = accept[labels]
    return BinaryMask(out, vol.spacing)


def roc_curve(scores, positive, weights=None):
    """ROC points (fpr, tpr, thresholds) for ``score >= threshold`` decisions.

    With ``weights`` (e.g. superpixel sizes) each instance counts by its
    weight instead of once.
    """
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positive, dtype=bool)
    w = np.ones_like(s) if weights is None else np.asarray(weights, dtype=np.float64)
    thresholds = np.unique(s)[::-1]
    order = np.argsort(-s, kind="stable")
    s_sorted, pos_sorted, w_sorted = s[order], pos[order], w[order]
    tp_cum = np.cumsum(w_sorted * pos_sorted)
    fp_cum = np.cumsum(w_sorted * ~pos_sorted)
    last = np.searchsorted(-s_sorted, -thresholds, side="right") - 1
    P, N = tp_cum[-1], fp_cum[-1]
    tpr = tp_cum[last] / P if P > 0 else np.zeros(last.size)
    fpr = fp_cum[last] / N if N > 0 else np.zeros(last.size)
    return np.concatenate([[0.0], fpr]), np.concatenate([[0.0], tpr]), np.concatenate([[np.inf], thresholds])
