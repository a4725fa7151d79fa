"""Grayscale SLIC over-segmentation of axial slices and boundary recall."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np
from scipy import ndimage
from skimage.measure import label as connected_components

from .errors import DataError, EmptyBoundaryError, SliceTooSmallError
from .volumes import CtVolume, LabelVolume


@dataclass(frozen=True)
class SlicParams:
    region_size: int = 10
    compactness: float = 10.0
    iterations: int = 10
    intensity_scale: float = 16.0

    def __post_init__(self):
        if int(self.region_size) < 2:
            raise DataError("region_size must be >= 2")
        if int(self.iterations) < 1:
            raise DataError("iterations must be >= 1")
        if not self.compactness > 0:
            raise DataError("compactness must be > 0")
        if not self.intensity_scale > 0:
            raise DataError("intensity_scale must be > 0")


@dataclass(frozen=True)
class SuperpixelSlice:
    labels: np.ndarray  # [y, x], values 0..K-1

    @property
    def n_labels(self) -> int:
        return int(self.labels.max()) + 1

    @property
    def dims(self):
        ny, nx = self.labels.shape
        return nx, ny


@dataclass(frozen=True)
class BoundaryRecallCurve:
    distances: List[int]
    recall: List[float] = field(default_factory=list)


def _grid_centers(n: int, step: int) -> np.ndarray:
    k = max(1, int(round(n / step)))
    return (np.arange(k) + 0.5) * (n / k) - 0.5


def _gradient_magnitude(img: np.ndarray) -> np.ndarray:
    p = np.pad(img, 1, mode="edge")
    gx = p[1:-1, 2:] - p[1:-1, :-2]
    gy = p[2:, 1:-1] - p[:-2, 1:-1]
    return gx * gx + gy * gy


def _perturb_centers(cy: np.ndarray, cx: np.ndarray, grad: np.ndarray):
    """Move each seed to the lowest-gradient pixel of its 3x3 neighbourhood.

    A seed only moves when some neighbour is strictly smoother than the pixel
    nearest the seed; otherwise the (possibly fractional) position is kept.
    """
    ny, nx = grad.shape
    cy, cx = cy.copy(), cx.copy()
    for k in range(cy.size):
        py, px = int(np.floor(cy[k] + 0.5)), int(np.floor(cx[k] + 0.5))
        y0, y1 = max(py - 1, 0), min(py + 2, ny)
        x0, x1 = max(px - 1, 0), min(px + 2, nx)
        win = grad[y0:y1, x0:x1]
        j = int(np.argmin(win))
        if win.flat[j] < grad[py, px]:
            oy, ox = divmod(j, win.shape[1])
            cy[k], cx[k] = y0 + oy, x0 + ox
    return cy, cx


def _enforce_connectivity(labels: np.ndarray) -> np.ndarray:
    """Merge every non-largest fragment of a label into its most adjacent label.

    Fragments are resolved in raster order of their first pixel, counting only
    adjacency to already-settled regions so that every output label is
    4-connected. Ties go to the lowest label. Unassigned pixels (-1) are
    treated as fragments with no home label.
    """
    comp = connected_components(labels + 1, background=-1, connectivity=1)
    n_comp = int(comp.max())
    flat_comp = comp.ravel()
    sizes = np.bincount(flat_comp, minlength=n_comp + 1)
    comp_label = np.full(n_comp + 1, -1, dtype=np.int64)
    comp_label[flat_comp] = labels.ravel()

    # keep the largest fragment per label; np.lexsort orders by label, -size, id
    ids = np.arange(1, n_comp + 1)
    order = np.lexsort((ids, -sizes[1:], comp_label[1:]))
    first = np.ones(order.size, dtype=bool)
    sorted_labels = comp_label[1:][order]
    first[1:] = sorted_labels[1:] != sorted_labels[:-1]
    resolved = np.full(n_comp + 1, -1, dtype=np.int64)
    keep = ids[order][first & (sorted_labels >= 0)]
    resolved[keep] = comp_label[keep]
    orphans = [int(c) for c in ids if resolved[c] < 0]
    if not orphans:
        return labels

    a = np.concatenate([comp[:, :-1].ravel(), comp[:-1, :].ravel()])
    b = np.concatenate([comp[:, 1:].ravel(), comp[1:, :].ravel()])
    diff = a != b
    a, b = a[diff], b[diff]
    pairs = np.concatenate([a, b]).astype(np.int64) * (n_comp + 1) + np.concatenate([b, a])
    codes, counts = np.unique(pairs, return_counts=True)
    src, dst = codes // (n_comp + 1), codes % (n_comp + 1)
    starts = np.searchsorted(src, np.arange(n_comp + 2))

    pending = orphans
    while pending:
        deferred = []
        for c in pending:
            lo, hi = starts[c], starts[c + 1]
            nb_labels = resolved[dst[lo:hi]]
            ok = nb_labels >= 0
            if not ok.any():
                deferred.append(c)
                continue
            tally = np.bincount(nb_labels[ok], weights=counts[lo:hi][ok])
            resolved[c] = int(np.argmax(tally))
        if len(deferred) == len(pending):
            raise RuntimeError("connectivity enforcement made no progress")
        pending = deferred
    return resolved[comp]


def _relabel_raster(labels: np.ndarray) -> np.ndarray:
    flat = labels.ravel()
    uniq, first_idx, inverse = np.unique(flat, return_index=True, return_inverse=True)
    rank = np.empty(uniq.size, dtype=np.int64)
    rank[np.argsort(first_idx, kind="stable")] = np.arange(uniq.size)
    return rank[inverse].reshape(labels.shape).astype(np.int32)


def slic_slice(slice_: np.ndarray, params: SlicParams = SlicParams()) -> SuperpixelSlice:
    """SLIC superpixels on one 2D intensity slice indexed ``[y, x]``."""
    img = np.asarray(slice_, dtype=np.float64)
    if img.ndim != 2:
        raise DataError("slic_slice expects a 2D array")
    ny, nx = img.shape
    S = int(params.region_size)
    if nx < S or ny < S:
        raise SliceTooSmallError(f"slice {nx}x{ny} is smaller than region size {S}")

    color = img / params.intensity_scale
    gy0 = _grid_centers(ny, S)
    gx0 = _grid_centers(nx, S)
    cy, cx = np.meshgrid(gy0, gx0, indexing="ij")
    cy, cx = _perturb_centers(cy.ravel(), cx.ravel(), _gradient_magnitude(color))
    pyi = np.floor(cy + 0.5).astype(int)
    pxi = np.floor(cx + 0.5).astype(int)
    cc = color[np.clip(pyi, 0, ny - 1), np.clip(pxi, 0, nx - 1)]

    spatial_w = (params.compactness / S) ** 2
    yy = np.arange(ny, dtype=np.float64)
    xx = np.arange(nx, dtype=np.float64)
    flat_y = np.repeat(yy, nx)
    flat_x = np.tile(xx, ny)
    flat_c = color.ravel()
    n_centers = cy.size
    labels = np.full((ny, nx), -1, dtype=np.int64)

    for _ in range(int(params.iterations)):
        best = np.full((ny, nx), np.inf)
        labels.fill(-1)
        for k in range(n_centers):
            y0 = max(int(np.ceil(cy[k] - S)), 0)
            y1 = min(int(np.floor(cy[k] + S)), ny - 1) + 1
            x0 = max(int(np.ceil(cx[k] - S)), 0)
            x1 = min(int(np.floor(cx[k] + S)), nx - 1) + 1
            if y0 >= y1 or x0 >= x1:
                continue
            dy = yy[y0:y1, None] - cy[k]
            dx = xx[None, x0:x1] - cx[k]
            dc = color[y0:y1, x0:x1] - cc[k]
            d = dc * dc + (dy * dy + dx * dx) * spatial_w
            win_best = best[y0:y1, x0:x1]
            closer = d < win_best
            win_best[closer] = d[closer]
            labels[y0:y1, x0:x1][closer] = k

        flat_l = labels.ravel()
        hit = flat_l >= 0
        cnt = np.bincount(flat_l[hit], minlength=n_centers)
        live = cnt > 0
        sy = np.bincount(flat_l[hit], weights=flat_y[hit], minlength=n_centers)
        sx = np.bincount(flat_l[hit], weights=flat_x[hit], minlength=n_centers)
        sc = np.bincount(flat_l[hit], weights=flat_c[hit], minlength=n_centers)
        cy[live] = sy[live] / cnt[live]
        cx[live] = sx[live] / cnt[live]
        cc[live] = sc[live] / cnt[live]

    labels = _enforce_connectivity(labels)
    return SuperpixelSlice(_relabel_raster(labels))


def slic_volume(vol: CtVolume, params: SlicParams = SlicParams(), workers: int = 1) -> LabelVolume:
    """Apply :func:`slic_slice` to every axial slice independently."""

    def run(z):
        try:
            return slic_slice(vol.data[z], params).labels
        except DataError as exc:
            raise type(exc)(f"slice {z}: {exc}") from exc

    nz = vol.data.shape[0]
    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            slices = list(pool.map(run, range(nz)))
    else:
        slices = [run(z) for z in range(nz)]
    return LabelVolume(np.stack(slices).astype(np.uint32), vol.spacing)


def label_boundaries(labels) -> np.ndarray:
    """Boolean map of pixels with at least one 4-neighbour carrying a different label."""
    lab = labels.labels if isinstance(labels, SuperpixelSlice) else np.asarray(labels)
    out = np.zeros(lab.shape, dtype=bool)
    h = lab[:, 1:] != lab[:, :-1]
    v = lab[1:, :] != lab[:-1, :]
    out[:, 1:] |= h
    out[:, :-1] |= h
    out[1:, :] |= v
    out[:-1, :] |= v
    return out


def recall_from_boundaries(sp_boundary: np.ndarray, gt_boundary: np.ndarray, distances: Sequence[int]) -> BoundaryRecallCurve:
    """Fraction of ground-truth boundary pixels within Chebyshev distance d of ``sp_boundary``."""
    gt_boundary = np.asarray(gt_boundary, dtype=bool)
    n_gt = int(gt_boundary.sum())
    if n_gt == 0:
        raise EmptyBoundaryError("ground truth has no boundary pixels")
    distances = [int(d) for d in distances]
    if not np.any(sp_boundary):
        return BoundaryRecallCurve(distances, [0.0] * len(distances))
    dist = ndimage.distance_transform_cdt(~np.asarray(sp_boundary, dtype=bool), metric="chessboard")
    at_gt = dist[gt_boundary]
    return BoundaryRecallCurve(distances, [float(np.count_nonzero(at_gt <= d)) / n_gt for d in distances])


def boundary_recall(sp, gt_mask: np.ndarray, distances: Sequence[int] = range(1, 7)) -> BoundaryRecallCurve:
    """Boundary recall of a label map against a 2D ground-truth mask.

    ``sp`` may be a :class:`SuperpixelSlice` or any integer label array, so
    other over-segmentation algorithms can be scored the same way.
    """
    gt_b = label_boundaries(np.asarray(gt_mask).astype(np.int8))
    return recall_from_boundaries(label_boundaries(sp), gt_b, distances)
