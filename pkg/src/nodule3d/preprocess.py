"""Resampling, intensity windowing and labelled cube extraction."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import MalformedNpy, NoValidPlacement, ShapeMismatch
from .volume_io import Annotation, Category, ScanMeta, Volume, world_to_voxel

MANIFEST_NAME = "manifest.csv"
MANIFEST_COLUMNS = ("path", "label", "series", "cx", "cy", "cz")


@dataclass(frozen=True)
class SamplerConfig:
    cube_edge: int = 48
    target_spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    hu_window: tuple[float, float] = (-1000.0, 400.0)
    seed: int = 0
    positives_per_nodule: int = 1
    negatives_per_scan: int = 1
    max_attempts: int = 1000

    def __post_init__(self):
        if self.cube_edge < 8:
            raise ValueError("cube_edge must be >= 8")
        if not self.hu_window[0] < self.hu_window[1]:
            raise ValueError("hu_window low must be below high")
        if any(not s > 0 for s in self.target_spacing):
            raise ValueError("target spacing must be positive")


@dataclass(frozen=True)
class CubeSample:
    data: np.ndarray
    label: int
    source_series: str
    corner_voxel: tuple[int, int, int]

    @property
    def edge(self) -> int:
        return self.data.shape[0]


# --------------------------------------------------------------------------
# Resampling
# --------------------------------------------------------------------------

def trilinear(voxels: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Sample a ``[z, y, x]`` grid at fractional ``(x, y, z)`` voxel positions.

    Positions outside the grid are clamped to the nearest edge voxel.
    """
    pts = np.asarray(points, dtype=np.float64)
    vox = np.asarray(voxels, dtype=np.float64)
    idx0, frac = [], []
    for axis in range(3):
        n = vox.shape[2 - axis]
        c = np.clip(pts[..., axis], 0.0, n - 1)
        i0 = np.minimum(np.floor(c).astype(np.intp), max(n - 2, 0))
        idx0.append(i0)
        frac.append(c - i0)
    out = np.zeros(pts.shape[:-1])
    for dz in (0, 1):
        for dy in (0, 1):
            for dx in (0, 1):
                w = ((frac[0] if dx else 1 - frac[0])
                     * (frac[1] if dy else 1 - frac[1])
                     * (frac[2] if dz else 1 - frac[2]))
                zi = np.minimum(idx0[2] + dz, vox.shape[0] - 1)
                yi = np.minimum(idx0[1] + dy, vox.shape[1] - 1)
                xi = np.minimum(idx0[0] + dx, vox.shape[2] - 1)
                out += w * vox[zi, yi, xi]
    return out


def _interp_axis(arr: np.ndarray, axis: int, coords: np.ndarray) -> np.ndarray:
    n = arr.shape[axis]
    c = np.clip(coords, 0.0, n - 1)
    i0 = np.minimum(np.floor(c).astype(np.intp), max(n - 2, 0))
    i1 = np.minimum(i0 + 1, n - 1)
    t = c - i0
    shape = [1] * arr.ndim
    shape[axis] = -1
    t = t.reshape(shape)
    return np.take(arr, i0, axis=axis) * (1 - t) + np.take(arr, i1, axis=axis) * t


def output_dims(meta: ScanMeta, target_spacing: Sequence[float]) -> tuple[int, int, int]:
    return tuple(
        max(1, int(math.floor(meta.dims[i] * meta.spacing[i] / target_spacing[i] + 0.5)))
        for i in range(3)
    )


def resample(v: Volume, target_spacing: Sequence[float]) -> Volume:
    """Trilinear resampling onto a grid with ``target_spacing`` and the same origin."""
    target = tuple(float(s) for s in target_spacing)
    if any(not s > 0 for s in target):
        raise ValueError("target spacing must be positive")
    dims = output_dims(v.meta, target)
    meta = replace(v.meta, dims=dims, spacing=target, element_type="float32")
    if target == v.meta.spacing:
        return Volume(meta, v.voxels.astype(np.float32, copy=True))

    # trilinear interpolation is separable: one linear pass per axis
    arr = v.voxels.astype(np.float64)
    for axis in range(3):
        array_axis = 2 - axis
        coords = np.arange(dims[axis]) * (target[axis] / v.meta.spacing[axis])
        arr = _interp_axis(arr, array_axis, coords)
    return Volume(meta, arr.astype(np.float32))


def normalize(v: Volume, hu_window: Sequence[float] = (-1000.0, 400.0)) -> Volume:
    low, high = float(hu_window[0]), float(hu_window[1])
    if not low < high:
        raise ValueError("hu_window low must be below high")
    vox = (np.clip(v.voxels.astype(np.float64), low, high) - low) / (high - low)
    return Volume(replace(v.meta, element_type="float32"), vox.astype(np.float32))


# --------------------------------------------------------------------------
# Cube extraction
# --------------------------------------------------------------------------

def contains(corner: Sequence[int], edge: int, point: Sequence[float]) -> bool:
    """True when ``point`` lies strictly inside the cube at ``corner``."""
    return all(corner[i] < point[i] < corner[i] + edge for i in range(3))


def _crop(v: Volume, corner: Sequence[int], edge: int) -> np.ndarray:
    x, y, z = corner
    return np.ascontiguousarray(v.voxels[z:z + edge, y:y + edge, x:x + edge], dtype=np.float32)


def extract_positive_cube(v: Volume, a: Annotation, rng: np.random.Generator,
                          edge: int = 48) -> CubeSample:
    """Crop a cube whose interior holds the nodule centre, uniformly over valid corners."""
    if a.category is not Category.LARGE_NODULE:
        raise ValueError(f"positive cubes need a large nodule, got {a.category.value}")
    center = world_to_voxel(v.meta, a.center_world)
    corner = []
    for i in range(3):
        lo = max(0, math.floor(center[i] - edge) + 1)
        hi = min(v.meta.dims[i] - edge, math.ceil(center[i]) - 1)
        if lo > hi:
            raise NoValidPlacement(
                f"no {edge}-voxel cube inside dims {v.meta.dims} holds nodule at voxel {center}"
            )
        corner.append(int(rng.integers(lo, hi + 1)))
    corner = tuple(corner)
    return CubeSample(_crop(v, corner, edge), 1, v.meta.series_id, corner)


def extract_negative_cube(v: Volume, malignant: Iterable[Annotation], rng: np.random.Generator,
                          edge: int = 48, max_attempts: int = 1000) -> CubeSample:
    """Crop a random cube holding no malignant nodule centre (rejection sampled)."""
    if any(d < edge for d in v.meta.dims):
        raise NoValidPlacement(f"volume dims {v.meta.dims} smaller than cube edge {edge}")
    centers = [world_to_voxel(v.meta, a.center_world)
               for a in malignant if a.category is Category.LARGE_NODULE]
    for _ in range(max_attempts):
        corner = tuple(int(rng.integers(0, v.meta.dims[i] - edge + 1)) for i in range(3))
        if not any(contains(corner, edge, c) for c in centers):
            return CubeSample(_crop(v, corner, edge), 0, v.meta.series_id, corner)
    raise NoValidPlacement(f"no nodule-free cube found in {max_attempts} attempts")


def preprocess_scan(v: Volume, annotations: Sequence[Annotation], config: SamplerConfig,
                    rng: np.random.Generator) -> list[CubeSample]:
    """Resample, window and cut the configured number of cubes from one scan."""
    v = normalize(resample(v, config.target_spacing), config.hu_window)
    mine = [a for a in annotations if a.series_id == v.meta.series_id]
    large = [a for a in mine if a.category is Category.LARGE_NODULE]
    cubes = []
    for a in large:
        for _ in range(config.positives_per_nodule):
            cubes.append(extract_positive_cube(v, a, rng, config.cube_edge))
    for _ in range(config.negatives_per_scan):
        cubes.append(extract_negative_cube(v, large, rng, config.cube_edge, config.max_attempts))
    return cubes


# --------------------------------------------------------------------------
# NPY cube cache
# --------------------------------------------------------------------------

def save_npy(path: str | os.PathLike, array: np.ndarray) -> None:
    """Write a version 1.0 NPY file holding little-endian float32 data."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        np.lib.format.write_array_header_1_0(
            fh, {"descr": "<f4", "fortran_order": False, "shape": arr.shape})
        fh.write(arr.tobytes())


def load_npy(path: str | os.PathLike, shape: tuple[int, ...] | None = None) -> np.ndarray:
    with open(path, "rb") as fh:
        try:
            version = np.lib.format.read_magic(fh)
            if version != (1, 0):
                raise MalformedNpy(f"{path}: NPY version {version}, expected 1.0")
            file_shape, fortran, dtype = np.lib.format.read_array_header_1_0(fh)
        except ValueError as exc:
            raise MalformedNpy(f"{path}: {exc}") from exc
        if fortran or dtype != np.dtype("<f4"):
            raise MalformedNpy(f"{path}: expected C-ordered <f4 data, got {dtype}")
        if shape is not None and tuple(file_shape) != tuple(shape):
            raise ShapeMismatch(f"{path}: shape {file_shape}, expected {shape}")
        payload = fh.read()
    count = int(np.prod(file_shape))
    if len(payload) != 4 * count:
        raise MalformedNpy(f"{path}: payload holds {len(payload)} bytes, expected {4 * count}")
    return np.frombuffer(payload, dtype="<f4").reshape(file_shape).copy()


def save_cube(sample: CubeSample, path: str | os.PathLike) -> dict:
    """Write the cube array and return its manifest row."""
    save_npy(path, sample.data)
    cx, cy, cz = sample.corner_voxel
    return {"path": Path(path).name, "label": sample.label, "series": sample.source_series,
            "cx": cx, "cy": cy, "cz": cz}


def load_cube(path: str | os.PathLike, row: dict, edge: int = 48) -> CubeSample:
    data = load_npy(path, (edge, edge, edge))
    return CubeSample(data, int(row["label"]), row["series"],
                      (int(row["cx"]), int(row["cy"]), int(row["cz"])))


def write_cube_cache(samples: Iterable[CubeSample], out_dir: str | os.PathLike,
                     append: bool = False) -> Path:
    """Write ``<series>_<index>.npy`` files plus ``manifest.csv`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / MANIFEST_NAME
    counters: dict[str, int] = {}
    if append and manifest.exists():
        for row in read_manifest(out_dir):
            counters[row["series"]] = counters.get(row["series"], 0) + 1
    else:
        with open(manifest, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(MANIFEST_COLUMNS)
    with open(manifest, "a", newline="") as fh:
        writer = csv.DictWriter(fh, MANIFEST_COLUMNS, lineterminator="\n")
        for s in samples:
            index = counters.get(s.source_series, 0)
            counters[s.source_series] = index + 1
            writer.writerow(save_cube(s, out_dir / f"{s.source_series}_{index}.npy"))
    return manifest


def read_manifest(cache_dir: str | os.PathLike) -> list[dict]:
    manifest = Path(cache_dir) / MANIFEST_NAME
    with open(manifest, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_COLUMNS:
            raise MalformedNpy(f"{manifest}: unexpected columns {reader.fieldnames}")
        return list(reader)


def read_cube_cache(cache_dir: str | os.PathLike, edge: int | None = None) -> list[CubeSample]:
    cache_dir = Path(cache_dir)
    out = []
    for row in read_manifest(cache_dir):
        if edge is None:
            data = load_npy(cache_dir / row["path"])
            edge = data.shape[0]
        out.append(load_cube(cache_dir / row["path"], row, edge))
    return out
