"""46-dimensional patch descriptors.

Slot layout of every patch vector:

====== ==========================================================
0-31   dense SIFT, index ``(cell_y * 2 + cell_x) * 8 + orientation``
32-34  intensity mean / median / std over the full patch P
35-37  the same over P' (patch pixels in the centre's superpixel)
38-40  LUT probability mean / median / std over P
41-43  the same over P'
44-45  x and y position relative to the body bounding box
====== ==========================================================
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError, DegenerateBoxError, FormatError, SampleError, WindowError
from .volumes import MAX_INTENSITY, BinaryMask, CtVolume, LabelVolume, bounding_box_2d, check_same_dims

N_FEATURES = 46
FEATURE_NAMES = (
    [f"dsift{i:02d}" for i in range(32)]
    + ["imeanP", "imedP", "istdP", "imeanPp", "imedPp", "istdPp"]
    + ["pmeanP", "pmedP", "pstdP", "pmeanPp", "pmedPp", "pstdPp"]
    + ["relx", "rely"]
)
N_LEVELS = MAX_INTENSITY + 1
MIN_BANDWIDTH = 1.0


@dataclass(frozen=True)
class PatchGrid:
    stride: int = 3
    patch_size: int = 25

    def __post_init__(self):
        if self.patch_size % 2 != 1 or self.patch_size < 1:
            raise DataError("patch_size must be a positive odd integer")
        if self.stride < 1:
            raise DataError("stride must be >= 1")

    @property
    def half(self) -> int:
        return self.patch_size // 2

    def centers(self, body_slice: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Grid points (y, x) in raster order whose patch fits the slice and whose centre is in the body."""
        ny, nx = body_slice.shape
        h = self.half
        ys = np.arange(h, ny - h, self.stride)
        xs = np.arange(h, nx - h, self.stride)
        if ys.size == 0 or xs.size == 0:
            return np.empty(0, int), np.empty(0, int)
        gy, gx = np.meshgrid(ys, xs, indexing="ij")
        gy, gx = gy.ravel(), gx.ravel()
        inside = body_slice[gy, gx]
        return gy[inside], gx[inside]


@dataclass(frozen=True)
class DsiftParams:
    bin_size: int = 6
    spatial_bins: int = 2
    orientation_bins: int = 8

    @property
    def length(self) -> int:
        return self.spatial_bins * self.spatial_bins * self.orientation_bins


# --- intensity likelihood lookup table ------------------------------------


@dataclass(frozen=True)
class IntensityLut:
    table: np.ndarray
    sigma_pos: float = float("nan")
    sigma_neg: float = float("nan")

    def __post_init__(self):
        table = np.asarray(self.table, dtype=np.float64)
        if table.shape != (N_LEVELS,):
            raise FormatError(f"LUT must have {N_LEVELS} entries, got {table.shape}")
        if not np.all((table >= 0) & (table <= 1)):
            raise DataError("LUT entries must lie in [0, 1]")
        table.setflags(write=False)
        object.__setattr__(self, "table", table)

    def __call__(self, intensities):
        return self.table[np.asarray(intensities)]

    def save(self, path) -> None:
        Path(path).write_text("".join(f"{v!r}\n" for v in self.table.tolist()))

    @classmethod
    def load(cls, path) -> "IntensityLut":
        lines = Path(path).read_text().split()
        try:
            values = [float(v) for v in lines]
        except ValueError as exc:
            raise FormatError(f"{path}: non-numeric LUT entry") from exc
        return cls(np.array(values))


def silverman_bandwidth(counts: np.ndarray) -> float:
    """1.06 * s * N^(-1/5) from an intensity histogram; s is the sample std."""
    n = counts.sum()
    if n < 2:
        return MIN_BANDWIDTH
    levels = np.arange(counts.size, dtype=np.float64)
    mean = (counts * levels).sum() / n
    var = (counts * (levels - mean) ** 2).sum() / (n - 1)
    sigma = 1.06 * np.sqrt(var) * n ** (-0.2)
    return float(sigma) if sigma > 0 else MIN_BANDWIDTH


def gaussian_kernel(d, sigma: float):
    d = np.asarray(d, dtype=np.float64)
    return np.exp(-(d * d) / (2.0 * sigma * sigma)) / (sigma * np.sqrt(2.0 * np.pi))


def _kde_on_levels(counts: np.ndarray, sigma: float) -> np.ndarray:
    offsets = np.arange(-MAX_INTENSITY, MAX_INTENSITY + 1)
    kernel = gaussian_kernel(offsets, sigma)
    full = np.convolve(counts.astype(np.float64), kernel)
    return full[MAX_INTENSITY : MAX_INTENSITY + N_LEVELS] / counts.sum()


def _histogram(samples, name: str) -> np.ndarray:
    s = np.asarray(samples).ravel()
    if s.size == 0:
        raise SampleError(f"{name} sample list is empty")
    if s.dtype.kind == "f":
        if not np.all(np.isfinite(s)) or np.any(s != np.round(s)):
            raise SampleError(f"{name} samples must be integer intensities")
    if s.min() < 0 or s.max() > MAX_INTENSITY:
        raise SampleError(f"{name} samples must lie in [0, 4095]")
    return np.bincount(s.astype(np.int64), minlength=N_LEVELS)


Bandwidth = Union[str, float, Tuple[float, float], None]


def build_lut_from_counts(pos_counts, neg_counts, bandwidth: Bandwidth = "auto") -> IntensityLut:
    """Likelihood-ratio table from per-intensity sample counts.

    ``bandwidth`` is ``"auto"`` (Silverman per class), a single sigma for both
    classes, or a ``(sigma_pos, sigma_neg)`` pair.
    """
    pos_counts = np.asarray(pos_counts, dtype=np.int64)
    neg_counts = np.asarray(neg_counts, dtype=np.int64)
    if pos_counts.sum() == 0 or neg_counts.sum() == 0:
        raise SampleError("both sample lists must be non-empty")
    if bandwidth in (None, "auto"):
        s_pos, s_neg = silverman_bandwidth(pos_counts), silverman_bandwidth(neg_counts)
    elif isinstance(bandwidth, (tuple, list)):
        s_pos, s_neg = (float(b) for b in bandwidth)
    else:
        s_pos = s_neg = float(bandwidth)
    if not (s_pos > 0 and s_neg > 0):
        raise SampleError("bandwidth must be positive")

    f_pos = _kde_on_levels(pos_counts, s_pos)
    f_neg = _kde_on_levels(neg_counts, s_neg)
    total = f_pos + f_neg
    table = np.zeros(N_LEVELS)
    ok = total > 0
    table[ok] = f_pos[ok] / total[ok]
    return IntensityLut(table, s_pos, s_neg)


def build_intensity_lut(pos_samples, neg_samples, bandwidth: Bandwidth = "auto") -> IntensityLut:
    """Gaussian-KDE pancreas probability f+ / (f+ + f-) for every intensity 0..4095.

    Entries where both densities underflow to zero are 0.
    """
    return build_lut_from_counts(_histogram(pos_samples, "positive"), _histogram(neg_samples, "negative"), bandwidth)


# --- dense SIFT ------------------------------------------------------------


def orientation_channels(img: np.ndarray, n_bins: int = 8) -> np.ndarray:
    """Gradient magnitude split over ``n_bins`` orientation channels (linear interpolation)."""
    gy, gx = np.gradient(np.asarray(img, dtype=np.float64))
    mag = np.hypot(gx, gy)
    theta = np.mod(np.arctan2(gy, gx), 2 * np.pi)
    t = theta / (2 * np.pi / n_bins)
    b0 = np.floor(t).astype(np.int64)
    w1 = t - b0
    b0 %= n_bins
    b1 = (b0 + 1) % n_bins
    ch = np.zeros((n_bins,) + img.shape)
    rows, cols = np.indices(img.shape)
    np.add.at(ch, (b0, rows, cols), mag * (1 - w1))
    np.add.at(ch, (b1, rows, cols), mag * w1)
    return ch


def _raw_histograms(channels: np.ndarray, ys, xs, params: DsiftParams) -> np.ndarray:
    B, nb = params.bin_size, params.spatial_bins
    half = B * nb // 2
    view = sliding_window_view(channels, (B, B), axis=(1, 2))
    parts = []
    for cyi in range(nb):
        for cxi in range(nb):
            cells = view[:, ys - half + cyi * B, xs - half + cxi * B]
            parts.append(cells.sum(axis=(2, 3)).T)
    return np.concatenate(parts, axis=1)


def normalize_descriptor(raw: np.ndarray, clamp: float = 0.2, return_clamped: bool = False):
    """L2 normalise, clamp at ``clamp``, L2 normalise again; zero rows stay zero."""
    raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
    norm = np.linalg.norm(raw, axis=1, keepdims=True)
    safe = np.where(norm > 0, norm, 1.0)
    clamped = np.minimum(raw / safe, clamp)
    norm2 = np.linalg.norm(clamped, axis=1, keepdims=True)
    out = clamped / np.where(norm2 > 0, norm2, 1.0)
    if return_clamped:
        return out, clamped
    return out


def _check_support(shape, ys, xs, params: DsiftParams):
    half = params.bin_size * params.spatial_bins // 2
    ny, nx = shape
    ys, xs = np.asarray(ys), np.asarray(xs)
    if ys.size and (ys.min() - half < 0 or xs.min() - half < 0 or ys.max() + half > ny or xs.max() + half > nx):
        raise WindowError("descriptor support window leaves the slice")


def dsift_many(slice_: np.ndarray, ys, xs, params: DsiftParams = DsiftParams()) -> np.ndarray:
    """Descriptors for many centres of one slice, shape ``(n, 32)``."""
    _check_support(slice_.shape, ys, xs, params)
    channels = orientation_channels(slice_, params.orientation_bins)
    raw = _raw_histograms(channels, np.asarray(ys), np.asarray(xs), params)
    return normalize_descriptor(raw)


def dsift_descriptor(slice_: np.ndarray, center: Tuple[int, int], params: DsiftParams = DsiftParams()) -> np.ndarray:
    """Single 32-vector at ``center = (x, y)``.

    The support is the ``2*bin_size`` square starting ``bin_size`` pixels
    left of and above the centre.
    """
    x, y = center
    return dsift_many(slice_, [y], [x], params)[0]


# --- patch statistics ------------------------------------------------------


def masked_stats(values: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Row-wise (mean, median, population std) over the selected entries, shape ``(n, 3)``."""
    values = np.asarray(values, dtype=np.float64)
    if mask is None:
        mean = values.mean(axis=1)
        med = np.median(values, axis=1)
        std = np.sqrt(((values - mean[:, None]) ** 2).mean(axis=1))
        return np.stack([mean, med, std], axis=1)
    cnt = mask.sum(axis=1)
    mean = np.where(mask, values, 0.0).sum(axis=1) / cnt
    std = np.sqrt(np.where(mask, (values - mean[:, None]) ** 2, 0.0).sum(axis=1) / cnt)
    srt = np.sort(np.where(mask, values, np.inf), axis=1)
    rows = np.arange(values.shape[0])
    lo = srt[rows, (cnt - 1) // 2]
    hi = srt[rows, cnt // 2]
    med = 0.5 * (lo + hi)
    return np.stack([mean, med, std], axis=1)


def _windows(img: np.ndarray, ys, xs, patch_size: int) -> np.ndarray:
    h = patch_size // 2
    view = sliding_window_view(img, (patch_size, patch_size))
    return view[np.asarray(ys) - h, np.asarray(xs) - h].reshape(len(ys), -1)


def patch_stats(slice_, center, patch_size: int, region: str, channel: str, sp, lut: Optional[IntensityLut] = None):
    """(mean, median, std) of one patch; ``region`` is ``"P"`` or ``"P'"``,
    ``channel`` is ``"intensity"`` or ``"lut"``."""
    x, y = center
    h = patch_size // 2
    ny, nx = slice_.shape
    if not (h <= x < nx - h and h <= y < ny - h):
        raise WindowError("patch leaves the slice")
    labels = sp.labels if hasattr(sp, "labels") else np.asarray(sp)
    if channel == "intensity":
        img = np.asarray(slice_, dtype=np.float64)
    elif channel in ("lut", "lut-probability"):
        if lut is None:
            raise DataError("the LUT channel needs a lookup table")
        img = lut.table[np.asarray(slice_)]
    else:
        raise DataError(f"unknown channel {channel!r}")
    vals = _windows(img, [y], [x], patch_size)
    if region == "P":
        mask = None
    elif region in ("P'", "Pp", "P′"):
        mask = _windows(labels, [y], [x], patch_size) == labels[y, x]
    else:
        raise DataError(f"unknown region {region!r}")
    return tuple(float(v) for v in masked_stats(vals, mask)[0])


def relative_position(center, bbox) -> Tuple[float, float]:
    x, y = center
    xmin, xmax, ymin, ymax = bbox
    if xmax <= xmin or ymax <= ymin:
        raise DegenerateBoxError(f"degenerate bounding box {bbox}")
    return (x - xmin) / (xmax - xmin), (y - ymin) / (ymax - ymin)


# --- full extraction -------------------------------------------------------


@dataclass
class PatchFeatures:
    """Patch vectors for one volume, rows in (z, y, x) order."""

    z: np.ndarray
    y: np.ndarray
    x: np.ndarray
    X: np.ndarray  # (n, 46)

    def __len__(self):
        return int(self.z.size)

    def labels_from(self, gt: BinaryMask) -> np.ndarray:
        """Centre-pixel rule: a patch is positive iff its centre lies in the ground truth."""
        return gt.data[self.z, self.y, self.x].astype(np.int8)


def slice_patch_features(
    img: np.ndarray,
    body_slice: np.ndarray,
    sp_slice: np.ndarray,
    lut: IntensityLut,
    grid: PatchGrid = PatchGrid(),
    dsift: DsiftParams = DsiftParams(),
    bbox=None,
):
    ys, xs = grid.centers(body_slice)
    n = ys.size
    if n == 0:
        return ys, xs, np.empty((0, N_FEATURES))
    if grid.half < dsift.bin_size * dsift.spatial_bins // 2:
        _check_support(img.shape, ys, xs, dsift)
    out = np.empty((n, N_FEATURES))
    out[:, :32] = dsift_many(img, ys, xs, dsift)

    fimg = np.asarray(img, dtype=np.float64)
    prob = lut.table[np.asarray(img)]
    pp_mask = _windows(sp_slice, ys, xs, grid.patch_size) == sp_slice[ys, xs][:, None]
    ivals = _windows(fimg, ys, xs, grid.patch_size)
    out[:, 32:35] = masked_stats(ivals)
    out[:, 35:38] = masked_stats(ivals, pp_mask)
    pvals = _windows(prob, ys, xs, grid.patch_size)
    out[:, 38:41] = masked_stats(pvals)
    out[:, 41:44] = masked_stats(pvals, pp_mask)

    if bbox is None:
        ysb = np.flatnonzero(body_slice.any(axis=1))
        xsb = np.flatnonzero(body_slice.any(axis=0))
        bbox = (xsb[0], xsb[-1], ysb[0], ysb[-1])
    xmin, xmax, ymin, ymax = bbox
    if xmax <= xmin or ymax <= ymin:
        raise DegenerateBoxError(f"degenerate body bounding box {bbox}")
    out[:, 44] = (xs - xmin) / (xmax - xmin)
    out[:, 45] = (ys - ymin) / (ymax - ymin)
    return ys, xs, out


def extract_patch_features(
    vol: CtVolume,
    body: BinaryMask,
    sp: LabelVolume,
    lut: IntensityLut,
    grid: PatchGrid = PatchGrid(),
    dsift: DsiftParams = DsiftParams(),
) -> PatchFeatures:
    check_same_dims(vol, body, sp)
    zs, ys_all, xs_all, rows = [], [], [], []
    for z in range(vol.data.shape[0]):
        if not body.data[z].any():
            continue
        ys, xs, feats = slice_patch_features(
            vol.data[z], body.data[z], sp.data[z].astype(np.int64), lut, grid, dsift, bounding_box_2d(body, z)
        )
        if ys.size == 0:
            continue
        zs.append(np.full(ys.size, z))
        ys_all.append(ys)
        xs_all.append(xs)
        rows.append(feats)
    if not rows:
        e = np.empty(0, dtype=np.int64)
        return PatchFeatures(e, e, e, np.empty((0, N_FEATURES)))
    return PatchFeatures(
        np.concatenate(zs).astype(np.int64),
        np.concatenate(ys_all).astype(np.int64),
        np.concatenate(xs_all).astype(np.int64),
        np.vstack(rows),
    )
