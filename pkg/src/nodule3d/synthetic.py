"""Seeded synthetic data: noisy volumes with bright spherical nodules.

Intensities are generated in the normalised [0, 1] range (background 0.2,
spheres 0.3 brighter, Gaussian noise sigma 0.05) and can be mapped to
Hounsfield units through the inverse of the default window.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .preprocess import CubeSample, write_cube_cache
from .seeding import substream
from .volume_io import (Annotation, Category, ScanMeta, Volume, format_annotations, voxel_to_world,
                        write_mhd)

BACKGROUND = 0.2
CONTRAST = 0.3
NOISE_SIGMA = 0.05
RADIUS_RANGE = (3.0, 8.0)


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]  # world mm, (x, y, z)
    radius: float                       # mm


def render(meta: ScanMeta, spheres: Sequence[Sphere], rng: np.random.Generator,
           background: float = BACKGROUND, contrast: float = CONTRAST,
           noise: float = NOISE_SIGMA) -> Volume:
    """Normalised volume on ``meta``'s grid with the given spheres painted in."""
    z, y, x = np.indices(meta.array_shape, dtype=np.float64)
    world = [x * meta.spacing[0] + meta.origin[0],
             y * meta.spacing[1] + meta.origin[1],
             z * meta.spacing[2] + meta.origin[2]]
    vox = np.full(meta.array_shape, background, dtype=np.float64)
    for s in spheres:
        d2 = sum((world[i] - s.center[i]) ** 2 for i in range(3))
        vox[d2 <= s.radius ** 2] += contrast
    vox += rng.normal(0.0, noise, size=vox.shape)
    return Volume(ScanMeta(meta.dims, meta.spacing, meta.origin, "float32", series_id=meta.series_id),
                  np.clip(vox, 0.0, 1.0).astype(np.float32))


def random_sphere(edge: int, rng: np.random.Generator) -> Sphere:
    """A sphere lying fully inside an ``edge``-voxel cube with unit spacing."""
    r = float(rng.uniform(*RADIUS_RANGE))
    c = tuple(float(v) for v in rng.uniform(r, edge - 1 - r, size=3))
    return Sphere(c, r)


def synthetic_cubes(n: int, seed: int, edge: int = 48, prefix: str = "synth") -> list[CubeSample]:
    """``n`` cubes, half holding one sphere (label 1), half pure background (label 0)."""
    rng = substream(seed, "synthetic", n, edge)
    labels = np.zeros(n, dtype=np.int64)
    labels[: (n + 1) // 2] = 1
    labels = labels[rng.permutation(n)]
    out = []
    for i, label in enumerate(labels):
        series = f"{prefix}{i:04d}"
        meta = ScanMeta((edge,) * 3, (1.0, 1.0, 1.0), series_id=series, element_type="float32")
        spheres = [random_sphere(edge, rng)] if label else []
        out.append(CubeSample(render(meta, spheres, rng).voxels, int(label), series, (0, 0, 0)))
    return out


def write_smoke_dataset(out_dir: str | os.PathLike, seed: int, n_train: int = 200,
                        n_val: int = 50, edge: int = 48) -> Path:
    """Cube cache of ``n_train + n_val`` single-cube scans (see :func:`synthetic_cubes`)."""
    cubes = synthetic_cubes(n_train + n_val, seed, edge)
    return write_cube_cache(cubes, out_dir)


def to_hu(v: Volume, hu_window=(-1000.0, 400.0)) -> Volume:
    """Map normalised intensities back to HU (inverse of the default window)."""
    lo, hi = hu_window
    meta = ScanMeta(v.meta.dims, v.meta.spacing, v.meta.origin, "int16",
                    series_id=v.meta.series_id)
    return Volume(meta, np.rint(lo + v.voxels.astype(np.float64) * (hi - lo)).astype(np.float32))


def write_scan(path: str | os.PathLike, v: Volume) -> Path:
    """Write a normalised synthetic volume as an int16 HU MetaImage pair."""
    return write_mhd(path, to_hu(v), element_type="int16")


def write_synthetic_scans(out_dir: str | os.PathLike, n: int, seed: int,
                          dims=(64, 64, 64), spacing=(1.0, 1.0, 1.0)) -> tuple[list[Path], Path]:
    """``n`` MetaImage scans, each with one large nodule, plus an annotation CSV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = substream(seed, "scans", n)
    paths, annotations = [], []
    for i in range(n):
        series = f"scan{i:03d}"
        meta = ScanMeta(tuple(dims), tuple(spacing), (-10.0 * i, 5.0, -20.0), "int16",
                        series_id=series)
        r = float(rng.uniform(4.0, 8.0))
        center_vox = [float(rng.uniform(r / spacing[a] + 1, dims[a] - 2 - r / spacing[a]))
                      for a in range(3)]
        center = voxel_to_world(meta, center_vox)
        paths.append(write_scan(out_dir / f"{series}.mhd", render(meta, [Sphere(center, r)], rng)))
        annotations.append(Annotation(series, center, 2 * r, Category.LARGE_NODULE))
    ann_path = out_dir / "annotations.csv"
    ann_path.write_text(format_annotations(annotations))
    return paths, ann_path
