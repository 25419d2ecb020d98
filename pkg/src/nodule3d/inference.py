"""Sliding-window inference over a whole scan and post-processing of the
resulting cube-resolution probability map."""

from __future__ import annotations

import csv
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import VolumeTooSmall
from .network import Model
from .volume_io import ScanMeta, Volume, voxel_to_world

_AXES = {"x": 2, "y": 1, "z": 0}


def window_positions(n: int, edge: int, stride: int) -> list[int]:
    """Window corners along one axis, with a final window flush to the far edge."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if n < edge:
        raise VolumeTooSmall(f"axis of {n} voxels is smaller than the {edge}-voxel window")
    positions = list(range(0, n - edge + 1, stride))
    if (n - edge) % stride:
        positions.append(n - edge)
    return positions


@dataclass(frozen=True)
class ProbabilityMap:
    grid: np.ndarray                    # [iz, iy, ix] probabilities
    positions: tuple[tuple[int, ...], tuple[int, ...], tuple[int, ...]]  # corners per x, y, z
    stride: int
    cube_edge: int
    meta: ScanMeta

    def corner(self, ix: int, iy: int, iz: int) -> tuple[int, int, int]:
        return self.positions[0][ix], self.positions[1][iy], self.positions[2][iz]


@dataclass(frozen=True)
class DetectionMask:
    mask: np.ndarray                    # bool, congruent with ProbabilityMap.grid
    threshold: float


@dataclass(frozen=True)
class Detection:
    index: tuple[int, int, int]         # (ix, iy, iz)
    center_world: tuple[float, float, float]
    probability: float


def sliding_window_predict(v: Volume, model: Model, stride: int = 24,
                           batch_size: int = 1) -> ProbabilityMap:
    """Run ``model`` on every window of a resampled, normalised volume.

    With ``batch_size=1`` each cell equals the model output on the
    independently cropped cube bit for bit.
    """
    edge = model.spec.input_edge
    if any(stride > d for d in v.meta.dims):
        raise VolumeTooSmall(f"stride {stride} exceeds volume extent {v.meta.dims}")
    positions = tuple(tuple(window_positions(v.meta.dims[a], edge, stride)) for a in range(3))
    px, py, pz = positions
    grid = np.zeros((len(pz), len(py), len(px)), dtype=np.float32)
    cells = [(iz, iy, ix) for iz in range(len(pz)) for iy in range(len(py)) for ix in range(len(px))]
    for start in range(0, len(cells), batch_size):
        chunk = cells[start:start + batch_size]
        cubes = np.stack([
            v.voxels[pz[iz]:pz[iz] + edge, py[iy]:py[iy] + edge, px[ix]:px[ix] + edge]
            for iz, iy, ix in chunk
        ])
        probs = model.predict_proba(cubes)
        for cell, p in zip(chunk, probs):
            grid[cell] = p
    return ProbabilityMap(grid, positions, stride, edge, v.meta)


def threshold_map(m: ProbabilityMap, t: float = 0.9) -> DetectionMask:
    """Cells with probability >= ``t`` (inclusive)."""
    if not 0 < t < 1:
        raise ValueError("threshold must lie in (0, 1)")
    return DetectionMask(m.grid >= np.float32(t), t)


def denoise(mask: DetectionMask) -> DetectionMask:
    """Drop set cells with no set 6-connected neighbour (single pass)."""
    m = mask.mask
    padded = np.pad(m, 1)
    inner = tuple(slice(1, -1) for _ in range(m.ndim))
    neighbours = np.zeros(m.shape, dtype=bool)
    for axis in range(m.ndim):
        for shift in (-1, 1):
            sl = list(inner)
            sl[axis] = slice(1 + shift, padded.shape[axis] - 1 + shift)
            neighbours |= padded[tuple(sl)]
    return DetectionMask(m & neighbours, mask.threshold)


def project_2d(grid: np.ndarray, axis: str = "z") -> np.ndarray:
    """Maximum-intensity projection of a ``[z, y, x]`` grid along ``axis``."""
    grid = np.asarray(grid)
    if grid.dtype == bool:
        grid = grid.astype(np.float32)
    return grid.max(axis=_AXES[axis])


def mask_to_world(mask: DetectionMask, m: ProbabilityMap) -> list[Detection]:
    """World-space cube centres (corner + edge/2) of every set cell."""
    out = []
    for iz, iy, ix in zip(*np.nonzero(mask.mask)):
        corner = m.corner(ix, iy, iz)
        center = voxel_to_world(m.meta, [c + m.cube_edge / 2 for c in corner])
        out.append(Detection((int(ix), int(iy), int(iz)), center, float(m.grid[iz, iy, ix])))
    return out


# --------------------------------------------------------------------------
# Export
# --------------------------------------------------------------------------

def write_map(m: ProbabilityMap, out_dir: str | os.PathLike, stem: str = "probability_map") -> Path:
    """``<stem>.csv`` (ix,iy,iz,probability), ``<stem>.raw`` (x-fastest <f4) and ``<stem>.txt``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / f"{stem}.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("ix", "iy", "iz", "probability"))
        nz, ny, nx = m.grid.shape
        for iz in range(nz):
            for iy in range(ny):
                for ix in range(nx):
                    writer.writerow((ix, iy, iz, repr(float(m.grid[iz, iy, ix]))))
    (out_dir / f"{stem}.raw").write_bytes(np.ascontiguousarray(m.grid, dtype="<f4").tobytes())
    nz, ny, nx = m.grid.shape
    sidecar = [
        f"dims = {nx} {ny} {nz}",
        f"stride = {m.stride}",
        f"cube_edge = {m.cube_edge}",
        *(f"positions_{a} = {' '.join(map(str, p))}" for a, p in zip("xyz", m.positions)),
        f"spacing = {' '.join(repr(s) for s in m.meta.spacing)}",
        f"origin = {' '.join(repr(o) for o in m.meta.origin)}",
    ]
    (out_dir / f"{stem}.txt").write_text("\n".join(sidecar) + "\n")
    return out_dir / f"{stem}.csv"


def read_map_raw(path: str | os.PathLike, dims: Sequence[int]) -> np.ndarray:
    nx, ny, nz = dims
    return np.frombuffer(Path(path).read_bytes(), dtype="<f4").reshape(nz, ny, nx)


def write_detections(path: str | os.PathLike, detections: Sequence[Detection]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("ix", "iy", "iz", "x", "y", "z", "probability"))
        for d in detections:
            writer.writerow((*d.index, *(repr(c) for c in d.center_world), repr(d.probability)))
    return path


def read_detections(path: str | os.PathLike) -> list[Detection]:
    with open(path, newline="") as fh:
        return [Detection((int(r["ix"]), int(r["iy"]), int(r["iz"])),
                          (float(r["x"]), float(r["y"]), float(r["z"])), float(r["probability"]))
                for r in csv.DictReader(fh)]


def write_pgm(path: str | os.PathLike, image: np.ndarray) -> Path:
    """Binary (P5) 8-bit graymap of ``round(255 * p)``; rows are the first axis."""
    img = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    h, w = img.shape
    path = Path(path)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())
    return path


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    match = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if not match or int(match.group(3)) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = int(match.group(1)), int(match.group(2))
    return np.frombuffer(data[match.end():], dtype=np.uint8).reshape(h, w)


def write_grid_csv(path: str | os.PathLike, image: np.ndarray) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in np.asarray(image):
            writer.writerow([repr(float(v)) for v in row])
    return path
