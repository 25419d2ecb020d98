"""MetaImage (.mhd/.raw) scans, LUNA-style annotation tables and
world/voxel coordinate conversion.

Coordinate tuples are always ordered (x, y, z).  Voxel arrays are stored
as numpy arrays indexed ``[z, y, x]`` so that C order is x-fastest, which
is the on-disk order of a MetaImage payload.
"""

from __future__ import annotations

import csv
import enum
import io
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    DecodeError,
    MalformedHeader,
    MalformedRow,
    SizeMismatch,
    UnsupportedField,
)

Triple = tuple[float, float, float]

#: MetaImage element type names and the numpy base types they decode to.
ELEMENT_TYPES = {
    "MET_SHORT": "int16",
    "MET_UCHAR": "uint8",
    "MET_FLOAT": "float32",
}
_MET_NAMES = {v: k for k, v in ELEMENT_TYPES.items()}

#: Diameter at which a nodule counts as "large" (radius 3 mm).
LARGE_NODULE_DIAMETER_MM = 6.0

ANNOTATION_COLUMNS = ("seriesuid", "coordX", "coordY", "coordZ", "diameter_mm")


@dataclass(frozen=True)
class ScanMeta:
    dims: tuple[int, int, int]
    spacing: Triple
    origin: Triple = (0.0, 0.0, 0.0)
    element_type: str = "int16"
    little_endian: bool = True
    raw_path: str = ""
    series_id: str = ""

    def __post_init__(self):
        if len(self.dims) != 3 or len(self.spacing) != 3 or len(self.origin) != 3:
            raise MalformedHeader("dims, spacing and origin need 3 components")
        if any(int(d) < 1 for d in self.dims):
            raise MalformedHeader(f"non-positive dimension in {self.dims}")
        if any(not float(s) > 0 for s in self.spacing):
            raise MalformedHeader(f"non-positive spacing in {self.spacing}")
        if self.element_type not in _MET_NAMES:
            raise UnsupportedField(f"element type {self.element_type!r}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.element_type).newbyteorder("<" if self.little_endian else ">")

    @property
    def n_voxels(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def raw_nbytes(self) -> int:
        return self.n_voxels * self.dtype.itemsize

    @property
    def array_shape(self) -> tuple[int, int, int]:
        """Shape of the voxel array, ``(z, y, x)``."""
        return self.dims[2], self.dims[1], self.dims[0]


@dataclass(frozen=True)
class Volume:
    meta: ScanMeta
    voxels: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.voxels.shape != self.meta.array_shape:
            raise SizeMismatch(
                f"voxel array shape {self.voxels.shape} does not match dims {self.meta.dims}"
            )


class Category(str, enum.Enum):
    SMALL_NODULE = "small_nodule"
    LARGE_NODULE = "large_nodule"
    NON_NODULE = "non_nodule"


@dataclass(frozen=True)
class Annotation:
    series_id: str
    center_world: Triple
    diameter_mm: float
    category: Category

    @property
    def malignant(self) -> bool:
        return self.category is Category.LARGE_NODULE


def categorize(diameter_mm: float) -> Category:
    """Map an annotated diameter to its category (``-1`` marks non-nodules)."""
    if diameter_mm == -1:
        return Category.NON_NODULE
    if diameter_mm < LARGE_NODULE_DIAMETER_MM:
        return Category.SMALL_NODULE
    return Category.LARGE_NODULE


# --------------------------------------------------------------------------
# MetaImage header
# --------------------------------------------------------------------------

def _floats(key: str, value: str, n: int) -> list[float]:
    try:
        out = [float(tok) for tok in value.split()]
    except ValueError:
        raise MalformedHeader(f"{key}: expected numbers, got {value!r}") from None
    if len(out) != n:
        raise MalformedHeader(f"{key}: expected {n} values, got {len(out)}")
    return out


def _bool(key: str, value: str) -> bool:
    v = value.strip().lower()
    if v in ("true", "1"):
        return True
    if v in ("false", "0"):
        return False
    raise MalformedHeader(f"{key}: expected True/False, got {value!r}")


def parse_mhd_header(text: str, series_id: str = "") -> ScanMeta:
    """Parse the ``Key = Value`` lines of a MetaImage header.

    Key order and surrounding whitespace are irrelevant.  ``Offset``
    defaults to the zero vector and byte order to little-endian.
    """
    fields: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise MalformedHeader(f"line {lineno}: expected 'Key = Value', got {line!r}")
        fields[key] = value.strip()

    for key in ("NDims", "DimSize", "ElementSpacing", "ElementType", "ElementDataFile"):
        if key not in fields:
            raise MalformedHeader(f"missing required key {key}")

    try:
        ndims = int(fields["NDims"])
    except ValueError:
        raise MalformedHeader(f"NDims: not an integer: {fields['NDims']!r}") from None
    if ndims != 3:
        raise UnsupportedField(f"NDims = {ndims}; only 3-D scans are supported")

    etype = fields["ElementType"]
    if etype not in ELEMENT_TYPES:
        raise UnsupportedField(f"ElementType = {etype}")
    if fields["ElementDataFile"].upper() == "LOCAL":
        raise UnsupportedField("ElementDataFile = LOCAL (embedded payload)")
    if "CompressedData" in fields and _bool("CompressedData", fields["CompressedData"]):
        raise UnsupportedField("CompressedData = True")

    dims = _floats("DimSize", fields["DimSize"], 3)
    if any(d != int(d) for d in dims):
        raise MalformedHeader(f"DimSize: non-integer value in {fields['DimSize']!r}")

    origin_key = next((k for k in ("Offset", "Origin", "Position") if k in fields), None)
    origin = _floats(origin_key, fields[origin_key], 3) if origin_key else [0.0, 0.0, 0.0]

    msb = False
    for key in ("ElementByteOrderMSB", "BinaryDataByteOrderMSB"):
        if key in fields:
            msb = _bool(key, fields[key])

    return ScanMeta(
        dims=tuple(int(d) for d in dims),
        spacing=tuple(_floats("ElementSpacing", fields["ElementSpacing"], 3)),
        origin=tuple(origin),
        element_type=ELEMENT_TYPES[etype],
        little_endian=not msb,
        raw_path=fields["ElementDataFile"],
        series_id=series_id,
    )


def format_mhd_header(meta: ScanMeta) -> str:
    def fmt(values):
        return " ".join(repr(float(v)) if not float(v).is_integer() else str(int(v)) for v in values)

    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        f"BinaryDataByteOrderMSB = {not meta.little_endian}",
        "CompressedData = False",
        f"Offset = {fmt(meta.origin)}",
        f"ElementSpacing = {fmt(meta.spacing)}",
        f"DimSize = {' '.join(str(d) for d in meta.dims)}",
        f"ElementType = {_MET_NAMES[meta.element_type]}",
        f"ElementDataFile = {meta.raw_path}",
    ]
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# Raw payload
# --------------------------------------------------------------------------

def load_raw_volume(meta: ScanMeta, data: bytes) -> Volume:
    """Decode a raw payload and widen it to float32."""
    if len(data) != meta.raw_nbytes:
        raise SizeMismatch(f"expected {meta.raw_nbytes} bytes for dims {meta.dims}, got {len(data)}")
    try:
        arr = np.frombuffer(data, dtype=meta.dtype)
    except (ValueError, TypeError) as exc:
        raise DecodeError(str(exc)) from exc
    voxels = arr.astype(np.float32).reshape(meta.array_shape)
    if not np.isfinite(voxels).all():
        raise DecodeError("payload contains NaN or Inf")
    return Volume(meta, voxels)


def encode_raw(volume: Volume, meta: ScanMeta | None = None) -> bytes:
    """Inverse of :func:`load_raw_volume`, encoding to ``meta.element_type``."""
    meta = meta or volume.meta
    vox = volume.voxels
    if meta.element_type != "float32":
        info = np.iinfo(meta.element_type)
        vox = np.clip(np.rint(vox), info.min, info.max)
    return np.ascontiguousarray(vox.astype(meta.dtype)).tobytes()


def read_mhd(path: str | os.PathLike) -> Volume:
    path = Path(path)
    meta = parse_mhd_header(path.read_text(encoding="ascii", errors="replace"), series_id=path.stem)
    raw = path.parent / meta.raw_path
    try:
        data = raw.read_bytes()
    except OSError as exc:
        raise DecodeError(f"cannot read {raw}: {exc}") from exc
    return load_raw_volume(meta, data)


def write_mhd(path: str | os.PathLike, volume: Volume, element_type: str | None = None) -> Path:
    """Write ``<path>`` (.mhd) and its companion ``.raw`` next to it."""
    path = Path(path)
    meta = replace(
        volume.meta,
        raw_path=path.with_suffix(".raw").name,
        element_type=element_type or volume.meta.element_type,
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    (path.parent / meta.raw_path).write_bytes(encode_raw(volume, meta))
    path.write_text(format_mhd_header(meta), encoding="ascii")
    return path


# --------------------------------------------------------------------------
# Annotations
# --------------------------------------------------------------------------

def parse_annotations(csv_text: str) -> list[Annotation]:
    """Parse a ``seriesuid,coordX,coordY,coordZ,diameter_mm`` table.

    A diameter of ``-1`` marks a non-nodule (benign) finding.
    """
    reader = csv.reader(io.StringIO(csv_text))
    rows = [r for r in reader if r and any(c.strip() for c in r)]
    if not rows:
        return []
    header = tuple(c.strip() for c in rows[0])
    if header != ANNOTATION_COLUMNS:
        raise MalformedRow(f"unexpected header {rows[0]!r}")

    out = []
    for lineno, row in enumerate(rows[1:], 2):
        if len(row) != len(ANNOTATION_COLUMNS):
            raise MalformedRow(f"line {lineno}: expected 5 columns, got {len(row)}")
        try:
            x, y, z, diameter = (float(c) for c in row[1:])
        except ValueError:
            raise MalformedRow(f"line {lineno}: non-numeric field in {row!r}") from None
        if not np.isfinite([x, y, z, diameter]).all():
            raise MalformedRow(f"line {lineno}: non-finite field in {row!r}")
        if diameter < 0 and diameter != -1:
            raise MalformedRow(f"line {lineno}: negative diameter {diameter}")
        category = categorize(diameter)
        out.append(Annotation(
            series_id=row[0].strip(),
            center_world=(x, y, z),
            diameter_mm=0.0 if category is Category.NON_NODULE else diameter,
            category=category,
        ))
    return out


def format_annotations(annotations: Sequence[Annotation]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ANNOTATION_COLUMNS)
    for a in annotations:
        diameter = -1 if a.category is Category.NON_NODULE else a.diameter_mm
        writer.writerow([a.series_id, *(repr(float(c)) for c in a.center_world), repr(float(diameter))])
    return buf.getvalue()


# --------------------------------------------------------------------------
# Coordinates
# --------------------------------------------------------------------------

def world_to_voxel(meta: ScanMeta, p: Sequence[float]) -> Triple:
    return tuple((float(p[i]) - meta.origin[i]) / meta.spacing[i] for i in range(3))


def voxel_to_world(meta: ScanMeta, v: Sequence[float]) -> Triple:
    return tuple(float(v[i]) * meta.spacing[i] + meta.origin[i] for i in range(3))
