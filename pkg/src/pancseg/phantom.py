"""Synthetic abdominal CT phantoms with a known pancreas mask."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Tuple

import numpy as np
from scipy import ndimage

from .errors import DataError
from .rng import derive_seed
from .volumes import (
    BinaryMask,
    CtVolume,
    DatasetManifest,
    ManifestEntry,
    hu_to_offset,
    save_mask,
    save_volume,
)


@dataclass(frozen=True)
class PhantomSpec:
    dims: Tuple[int, int, int] = (128, 128, 40)  # (nx, ny, nz)
    spacing: Tuple[float, float, float] = (0.8, 0.8, 2.0)
    pancreas_hu: float = 56.0  # stored offset intensity 1080
    pancreas_hu_jitter: float = 40.0
    pancreas_texture_hu: float = 18.0
    pancreas_fraction: Tuple[float, float] = (0.001, 0.01)
    distractors: Tuple[int, int] = (2, 4)
    noise_hu: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if min(self.dims) < 1:
            raise DataError("phantom dims must be positive")
        lo, hi = self.pancreas_fraction
        if not 0 < lo < hi:
            raise DataError("pancreas_fraction must be an increasing pair of positive fractions")


def _ellipse(gy, gx, cy, cx, ry, rx, angle=0.0):
    c, s = np.cos(angle), np.sin(angle)
    dy, dx = gy - cy, gx - cx
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    return u * u + v * v <= 1.0


def _lobulated(gy, gx, cy, cx, ry, rx, angle, phase, amp=0.15, lobes=5):
    c, s = np.cos(angle), np.sin(angle)
    dy, dx = gy - cy, gx - cx
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    theta = np.arctan2(v, u)
    r = np.sqrt(u * u + v * v)
    return r <= 1.0 + amp * np.sin(lobes * theta + phase)


def _pancreas(spec: PhantomSpec, rng, gy, gx, body_c, body_r, scale):
    """Per-slice lobulated ellipses along a head-to-tail curve through z."""
    nx, ny, nz = spec.dims
    cy_b, cx_b = body_c
    ry_b, rx_b = body_r
    z_len = max(3, int(round(nz * rng.uniform(0.30, 0.40))))
    z_lo = max(1, nz // 2 - z_len // 2 - nz // 8)
    z0 = int(rng.integers(z_lo, max(z_lo + 1, nz // 2 - z_len // 2 + nz // 8)))
    z0 = min(max(z0, 0), max(nz - z_len, 0))
    head = np.array([cy_b + ry_b * rng.uniform(0.05, 0.20), cx_b + rx_b * rng.uniform(-0.15, 0.0)])
    tail = np.array([cy_b + ry_b * rng.uniform(-0.15, 0.0), cx_b + rx_b * rng.uniform(0.25, 0.40)])
    angle = np.arctan2(tail[0] - head[0], tail[1] - head[1])
    phase = rng.uniform(0, 2 * np.pi)
    mask = np.zeros((nz, ny, nx), dtype=bool)
    for k in range(z_len):
        t = (k + 0.5) / z_len
        c = head + (tail - head) * t
        c = c + np.array([np.sin(np.pi * t) * ry_b * 0.05, 0.0])
        taper = 0.75 + 0.5 * np.sin(np.pi * t)
        ry = scale * 4.6 * taper * (ny / 128)
        rx = scale * 10.0 * taper * (nx / 128)
        mask[z0 + k] = _lobulated(gy, gx, c[0], c[1], ry, rx, angle, phase + 0.3 * k)
    return mask


def generate_phantom(spec: PhantomSpec = PhantomSpec(), index: int = 0) -> Tuple[CtVolume, BinaryMask]:
    """One phantom volume and its pancreas mask, fully determined by (spec.seed, index)."""
    nx, ny, nz = spec.dims
    rng = np.random.default_rng(derive_seed(spec.seed, "phantom", index))
    gy, gx = np.mgrid[0:ny, 0:nx].astype(np.float64)

    hu = np.full((nz, ny, nx), -1000.0)
    body_c = (ny * rng.uniform(0.44, 0.48), nx * rng.uniform(0.48, 0.52))
    body_r = (ny * rng.uniform(0.28, 0.31), nx * rng.uniform(0.38, 0.41))
    body2d = _ellipse(gy, gx, body_c[0], body_c[1], body_r[0], body_r[1])

    # patient table: bright slab separated from the body by an air gap
    table_y = int(body_c[0] + body_r[0] + max(3, ny // 40))
    table2d = (gy >= table_y) & (gy < table_y + max(2, ny // 40)) & (np.abs(gx - nx / 2) < nx * 0.45)

    def rel(fy, fx):
        return body_c[0] + fy * body_r[0], body_c[1] + fx * body_r[1]

    jit = lambda s=0.04: rng.uniform(-s, s)
    spine_c = rel(0.62 + jit(), 0.0 + jit())
    spine = _ellipse(gy, gx, *spine_c, body_r[0] * 0.22, body_r[1] * 0.14)
    aorta = _ellipse(gy, gx, *rel(0.30 + jit(), 0.08 + jit()), body_r[0] * 0.09, body_r[1] * 0.06)
    kid_l = _ellipse(gy, gx, *rel(0.45 + jit(), -0.45 + jit()), body_r[0] * 0.22, body_r[1] * 0.12, 0.4)
    kid_r = _ellipse(gy, gx, *rel(0.45 + jit(), 0.45 + jit()), body_r[0] * 0.22, body_r[1] * 0.12, -0.4)
    liver = _ellipse(gy, gx, *rel(-0.05 + jit(), -0.55 + jit()), body_r[0] * 0.55, body_r[1] * 0.33, 0.3)
    muscle_ring = body2d & ~_ellipse(gy, gx, body_c[0], body_c[1], body_r[0] - 4 * ny / 128, body_r[1] - 4 * nx / 128)

    scale = 1.0
    lo, hi = spec.pancreas_fraction
    body_voxels = body2d.sum() * nz
    for _ in range(20):
        panc = _pancreas(spec, np.random.default_rng(derive_seed(spec.seed, "pancreas", index)), gy, gx, body_c, body_r, scale)
        panc &= body2d[None]
        frac = panc.sum() / body_voxels
        if lo <= frac <= hi:
            break
        target = np.sqrt(lo * hi)
        scale *= np.sqrt(target / max(frac, 1e-9))
    else:
        raise DataError("could not fit the pancreas volume into the configured fraction range")

    # distractors: pancreas-like intensity blobs kept clear of the pancreas
    panc_any = panc.any(axis=0)
    keep_out = ndimage.binary_dilation(panc_any, iterations=max(4, nx // 24)) | spine | aorta
    n_dis = int(rng.integers(spec.distractors[0], spec.distractors[1] + 1))
    distractors = []
    tries = 0
    while len(distractors) < n_dis and tries < 200:
        tries += 1
        cy, cx = rel(rng.uniform(-0.75, 0.35), rng.uniform(-0.7, 0.75))
        ry = body_r[0] * rng.uniform(0.08, 0.16)
        rx = body_r[1] * rng.uniform(0.06, 0.14)
        blob = _lobulated(gy, gx, cy, cx, ry, rx, rng.uniform(0, np.pi), rng.uniform(0, 2 * np.pi), 0.2, 3)
        if (blob & keep_out).any() or (blob & ~body2d).any():
            continue
        za = int(rng.integers(0, nz))
        zb = int(min(nz, za + max(2, int(nz * rng.uniform(0.2, 0.6)))))
        distractors.append((blob, za, zb, spec.pancreas_hu + rng.uniform(-50, 50)))
        keep_out |= ndimage.binary_dilation(blob, iterations=2)

    liver_z = int(nz * rng.uniform(0.45, 0.65))
    kid_z = (int(nz * rng.uniform(0.1, 0.3)), int(nz * rng.uniform(0.7, 0.95)))
    panc_hu = spec.pancreas_hu + rng.uniform(-spec.pancreas_hu_jitter, spec.pancreas_hu_jitter)
    for z in range(nz):
        s = hu[z]
        s[table2d] = 250.0
        s[body2d] = -90.0
        s[muscle_ring] = 45.0
        if z < liver_z:
            s[liver] = 65.0
        if kid_z[0] <= z < kid_z[1]:
            s[kid_l] = 150.0
            s[kid_r] = 150.0
        s[aorta] = 190.0
        s[spine] = 500.0
        for blob, za, zb, level in distractors:
            if za <= z < zb:
                s[blob] = level

    hu += rng.normal(0.0, spec.noise_hu, hu.shape)
    texture = ndimage.gaussian_filter(rng.normal(0.0, 1.0, hu.shape), 1.0)
    texture *= spec.pancreas_texture_hu / max(texture.std(), 1e-9)
    hu[panc] = panc_hu + texture[panc] + rng.normal(0.0, spec.noise_hu, int(panc.sum()))

    vol = CtVolume(hu_to_offset(hu), spec.spacing)
    return vol, BinaryMask(panc, spec.spacing)


def generate_phantoms(spec: PhantomSpec, count: int, out_dir, n_folds: int = 6) -> DatasetManifest:
    """Write ``count`` phantom volume/mask pairs plus ``manifest.json``; folds are round-robin."""
    if count < 1:
        raise DataError("count must be >= 1")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out_dir}: {exc}") from exc
    entries = []
    for i in range(count):
        vol, mask = generate_phantom(spec, i)
        case = f"case{i:03d}"
        try:
            save_volume(out_dir / f"{case}_vol.mvol", vol)
            save_mask(out_dir / f"{case}_mask.mvol", mask)
        except OSError as exc:
            raise DataError(f"cannot write phantom {case}: {exc}") from exc
        entries.append(ManifestEntry(f"{case}_vol.mvol", f"{case}_mask.mvol", i % n_folds, case))
    manifest = DatasetManifest(entries, True, out_dir)
    manifest.save(out_dir / "manifest.json")
    return manifest


def piecewise_constant_slice(seed: int, size: int = 128, min_contrast_hu: float = 40.0):
    """Noise-free slice of constant regions plus the mask of one target region.

    Region levels are drawn from a ladder spaced ``min_contrast_hu`` apart, so
    every pair of distinct regions differs by at least that contrast.
    """
    rng = np.random.default_rng(derive_seed(seed, "piecewise"))
    gy, gx = np.mgrid[0:size, 0:size].astype(np.float64)
    ladder = -100.0 + min_contrast_hu * np.arange(12)
    levels = rng.permutation(ladder)
    hu = np.full((size, size), -1000.0)
    body = _ellipse(gy, gx, size / 2, size / 2, size * 0.42, size * 0.46)
    hu[body] = levels[0]
    for i in range(1, 6):
        cy, cx = rng.uniform(0.25, 0.75, 2) * size
        blob = _lobulated(gy, gx, cy, cx, size * rng.uniform(0.06, 0.14), size * rng.uniform(0.06, 0.16),
                          rng.uniform(0, np.pi), rng.uniform(0, 2 * np.pi), 0.2, 4)
        hu[blob & body] = levels[i]
    cy, cx = rng.uniform(0.35, 0.65, 2) * size
    target = _lobulated(gy, gx, cy, cx, size * rng.uniform(0.05, 0.08), size * rng.uniform(0.10, 0.16),
                        rng.uniform(0, np.pi), rng.uniform(0, 2 * np.pi))
    target &= body
    hu[target] = levels[6]
    return hu_to_offset(hu), target


def spec_to_dict(spec: PhantomSpec) -> dict:
    return asdict(spec)
