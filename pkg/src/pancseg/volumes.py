"""Volume and mask containers, MVOL file I/O and body segmentation."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage

from .errors import (
    DataError,
    DimensionMismatchError,
    EmptyBodyError,
    EmptySliceError,
    HeaderError,
    IntensityRangeError,
    SizeMismatchError,
    TypeMismatchError,
)

MAX_INTENSITY = 4095
HU_OFFSET = 1024
DEFAULT_BODY_THRESHOLD = 524  # about -500 HU

_DTYPES = {"u8": np.dtype("<u1"), "u16": np.dtype("<u2"), "u32": np.dtype("<u4")}


def hu_to_offset(hu):
    """Hounsfield units to stored offset intensity (clipped to [0, 4095])."""
    return np.clip(np.rint(np.asarray(hu, dtype=np.float64) + HU_OFFSET), 0, MAX_INTENSITY).astype(np.uint16)


def offset_to_hu(values):
    return np.asarray(values, dtype=np.int32) - HU_OFFSET


def _check_spacing(spacing):
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or not all(s > 0 and np.isfinite(s) for s in spacing):
        raise DataError(f"spacing must be three positive reals, got {spacing}")
    return spacing


@dataclass(frozen=True)
class CtVolume:
    """12-bit CT volume. ``data`` is indexed ``[z, y, x]`` (x fastest in memory)."""

    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.ascontiguousarray(self.data)
        if data.ndim != 3 or data.size == 0:
            raise DataError("volume data must be a non-empty 3D array")
        if data.dtype.kind not in "ui":
            raise TypeMismatchError(f"volume data must be integer, got {data.dtype}")
        if data.min() < 0 or data.max() > MAX_INTENSITY:
            raise IntensityRangeError("volume intensities must lie in [0, 4095]")
        data = data.astype(np.uint16, copy=False)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> Tuple[int, int, int]:
        nz, ny, nx = self.data.shape
        return nx, ny, nz

    def slice(self, z: int) -> np.ndarray:
        return self.data[z]


@dataclass(frozen=True)
class BinaryMask:
    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise DataError("mask data must be a 3D array")
        if data.dtype != bool:
            if not np.isin(data, (0, 1)).all():
                raise DataError("mask values must be 0 or 1")
            data = data.astype(bool)
        data = np.ascontiguousarray(data)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> Tuple[int, int, int]:
        nz, ny, nx = self.data.shape
        return nx, ny, nz

    def count(self) -> int:
        return int(self.data.sum())


@dataclass(frozen=True)
class LabelVolume:
    """Per-slice superpixel labels; label values only mean something within a slice."""

    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.ascontiguousarray(self.data)
        if data.ndim != 3:
            raise DataError("label data must be a 3D array")
        if data.size and data.min() < 0:
            raise DataError("labels must be non-negative")
        data = data.astype(np.uint32, copy=False)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> Tuple[int, int, int]:
        nz, ny, nx = self.data.shape
        return nx, ny, nz

    def n_labels(self, z: int) -> int:
        return int(self.data[z].max()) + 1


def check_same_dims(*items) -> None:
    dims = {item.dims for item in items}
    if len(dims) > 1:
        raise DimensionMismatchError(f"dimension mismatch: {sorted(dims)}")


# --- MVOL ------------------------------------------------------------------


def write_mvol(path, data: np.ndarray, spacing, dtype: str) -> None:
    """Write a ``[z, y, x]`` array as MVOL with the given on-disk dtype."""
    nz, ny, nx = data.shape
    header = (
        "MVOL 1\n"
        f"dims {nx} {ny} {nz}\n"
        f"spacing {' '.join(repr(float(s)) for s in spacing)}\n"
        f"dtype {dtype}\n"
        "data raw-le\n"
    )
    payload = np.ascontiguousarray(data, dtype=_DTYPES[dtype]).tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(payload)


def read_mvol(path) -> Tuple[np.ndarray, Tuple[float, float, float], str]:
    """Parse an MVOL file; returns ``(array[z, y, x], spacing, dtype_tag)``."""
    raw = Path(path).read_bytes()
    lines = []
    pos = 0
    for _ in range(5):
        end = raw.find(b"\n", pos)
        if end < 0:
            raise HeaderError(f"{path}: truncated header")
        try:
            lines.append(raw[pos:end].decode("ascii"))
        except UnicodeDecodeError as exc:
            raise HeaderError(f"{path}: non-ascii header") from exc
        pos = end + 1

    if lines[0] != "MVOL 1":
        raise HeaderError(f"{path}: bad magic line {lines[0]!r}")
    parts = [line.split() for line in lines[1:]]
    try:
        if parts[0][0] != "dims" or len(parts[0]) != 4:
            raise ValueError("dims")
        nx, ny, nz = (int(v) for v in parts[0][1:])
        if parts[1][0] != "spacing" or len(parts[1]) != 4:
            raise ValueError("spacing")
        spacing = tuple(float(v) for v in parts[1][1:])
        if parts[2][0] != "dtype" or len(parts[2]) != 2 or parts[2][1] not in _DTYPES:
            raise ValueError("dtype")
        dtype = parts[2][1]
        if parts[3] != ["data", "raw-le"]:
            raise ValueError("data")
    except (ValueError, IndexError) as exc:
        raise HeaderError(f"{path}: malformed header line ({exc})") from exc
    if min(nx, ny, nz) <= 0:
        raise HeaderError(f"{path}: dims must be positive")

    np_dtype = _DTYPES[dtype]
    payload = raw[pos:]
    expected = nx * ny * nz * np_dtype.itemsize
    if len(payload) != expected:
        raise SizeMismatchError(
            f"{path}: payload has {len(payload)} bytes, dims {nx}x{ny}x{nz} {dtype} need {expected}"
        )
    arr = np.frombuffer(payload, dtype=np_dtype).reshape(nz, ny, nx)
    return arr, spacing, dtype


def save_volume(path, vol: CtVolume) -> None:
    write_mvol(path, vol.data, vol.spacing, "u16")


def load_volume(path) -> CtVolume:
    arr, spacing, dtype = read_mvol(path)
    if dtype != "u16":
        raise TypeMismatchError(f"{path}: volumes are stored as u16, found {dtype}")
    if arr.max() > MAX_INTENSITY:
        raise IntensityRangeError(f"{path}: intensity {int(arr.max())} exceeds 4095")
    return CtVolume(arr.astype(np.uint16), spacing)


def save_mask(path, mask: BinaryMask) -> None:
    write_mvol(path, mask.data.astype(np.uint8), mask.spacing, "u8")


def load_mask(path) -> BinaryMask:
    arr, spacing, dtype = read_mvol(path)
    if dtype != "u8":
        raise TypeMismatchError(f"{path}: masks are stored as u8, found {dtype}")
    if arr.max(initial=0) > 1:
        raise DataError(f"{path}: mask values must be 0 or 1")
    return BinaryMask(arr.astype(bool), spacing)


def save_labels(path, labels: LabelVolume) -> None:
    write_mvol(path, labels.data, labels.spacing, "u32")


def load_labels(path) -> LabelVolume:
    arr, spacing, dtype = read_mvol(path)
    if dtype != "u32":
        raise TypeMismatchError(f"{path}: label volumes are stored as u32, found {dtype}")
    return LabelVolume(arr.astype(np.uint32), spacing)


# --- body segmentation -----------------------------------------------------

_SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


def segment_body(vol: CtVolume, threshold: int = DEFAULT_BODY_THRESHOLD) -> BinaryMask:
    """Threshold, keep the largest 6-connected component, fill holes per slice."""
    above = vol.data >= threshold
    if not above.any():
        raise EmptyBodyError(f"no voxel reaches the body threshold {threshold}")
    comp, n = ndimage.label(above, structure=_SIX_CONNECTED)
    sizes = np.bincount(comp.ravel())
    sizes[0] = 0
    body = comp == int(np.argmax(sizes))
    # 2D flood fill from the border: default structure is 4-connected background
    filled = np.empty_like(body)
    for z in range(body.shape[0]):
        filled[z] = ndimage.binary_fill_holes(body[z])
    return BinaryMask(filled, vol.spacing)


def bounding_box_2d(mask: BinaryMask, z: int) -> Tuple[int, int, int, int]:
    """Tight ``(xmin, xmax, ymin, ymax)`` of the set pixels in slice ``z``."""
    sl = mask.data[z]
    ys = np.flatnonzero(sl.any(axis=1))
    xs = np.flatnonzero(sl.any(axis=0))
    if ys.size == 0:
        raise EmptySliceError(f"slice {z} has no set pixels")
    return int(xs[0]), int(xs[-1]), int(ys[0]), int(ys[-1])


# --- dataset manifest ------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    volume: str
    mask: str
    fold: int
    case: str = ""


@dataclass
class DatasetManifest:
    entries: List[ManifestEntry]
    phantom: bool = True
    root: Optional[Path] = None

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def folds(self) -> List[int]:
        return sorted({e.fold for e in self.entries})

    def validate(self, check_files: bool = True) -> None:
        if any(not 0 <= e.fold <= 5 for e in self.entries):
            raise DataError("fold indices must lie in [0, 5]")
        if len({e.case for e in self.entries}) != len(self.entries):
            raise DataError("case identifiers must be unique")
        if not check_files:
            return
        for e in self.entries:
            vp, mp = self.resolve(e.volume), self.resolve(e.mask)
            for p in (vp, mp):
                if not p.exists():
                    raise DataError(f"manifest entry {e.case}: missing file {p}")
            v_hdr, m_hdr = _read_dims(vp), _read_dims(mp)
            if v_hdr != m_hdr:
                raise DimensionMismatchError(f"manifest entry {e.case}: volume dims {v_hdr} != mask dims {m_hdr}")

    def save(self, path) -> None:
        doc = {
            "phantom": self.phantom,
            "entries": [
                {"case": e.case, "volume": e.volume, "mask": e.mask, "fold": e.fold} for e in self.entries
            ],
        }
        Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def _read_dims(path) -> Tuple[int, int, int]:
    with open(path, "rb") as fh:
        fh.readline()
        parts = fh.readline().decode("ascii", "replace").split()
    if len(parts) != 4 or parts[0] != "dims":
        raise HeaderError(f"{path}: malformed header")
    return tuple(int(v) for v in parts[1:])


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        entries = [
            ManifestEntry(
                volume=str(e["volume"]),
                mask=str(e["mask"]),
                fold=int(e["fold"]),
                case=str(e.get("case") or Path(e["volume"]).stem),
            )
            for e in doc["entries"]
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: malformed manifest ({exc})") from exc
    manifest = DatasetManifest(entries, bool(doc.get("phantom", True)), path.parent)
    manifest.validate(check_files)
    return manifest
