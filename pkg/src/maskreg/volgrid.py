"""Volumetric data model, sampling primitives and MetaImage I/O.

All arrays are indexed ``[x, y, z]``; files store voxels x-fastest
(``index = x + nx * (y + ny * z)``), which is Fortran order for an
``(nx, ny, nz)`` array.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np


class GridMismatchError(ValueError):
    """Two volumes that must share a grid do not."""


class MetaImageError(ValueError):
    """Malformed MetaImage file."""


class UnsupportedElementTypeError(MetaImageError):
    pass


class PayloadSizeError(MetaImageError):
    pass


@dataclass(frozen=True)
class GridMeta:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise ValueError("GridMeta needs three dims, spacings and origins")
        if any(d < 1 for d in dims):
            raise ValueError(f"dims must be >= 1, got {dims}")
        if any(not (math.isfinite(s) and s > 0) for s in spacing):
            raise ValueError(f"spacing must be finite and > 0, got {spacing}")
        if any(not math.isfinite(o) for o in origin):
            raise ValueError(f"origin must be finite, got {origin}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def size(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def halved(self) -> "GridMeta":
        """Grid of the next coarser pyramid level."""
        return GridMeta(
            tuple(-(-d // 2) for d in self.dims),
            tuple(2.0 * s for s in self.spacing),
            self.origin,
        )


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


def check_same_grid(a: GridMeta, b: GridMeta) -> None:
    if a.dims != b.dims:
        raise GridMismatchError(f"grid mismatch: {a.dims} vs {b.dims}")


@dataclass(frozen=True, eq=False)
class ScalarVolume:
    """Real-valued volume (FF, WF, JD, statistic maps).

    Values are held as float64 in memory and serialized as MET_FLOAT.
    ``allow_nan`` is only used by statistic maps that flag invalid voxels.
    """

    meta: GridMeta
    values: np.ndarray
    allow_nan: bool = False

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != self.meta.dims:
            raise GridMismatchError(
                f"values shape {values.shape} does not match dims {self.meta.dims}")
        if self.allow_nan:
            if np.isinf(values).any():
                raise ValueError("volume values must not be infinite")
        elif not np.isfinite(values).all():
            raise ValueError("volume values must be finite")
        object.__setattr__(self, "values", _frozen(values))

    def __eq__(self, other):
        if not isinstance(other, ScalarVolume):
            return NotImplemented
        return self.meta == other.meta and np.array_equal(
            self.values, other.values, equal_nan=True)


LABEL_DTYPES = (np.uint8, np.uint16)


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Integer tissue labels, 0 = background.

    The storage dtype (uint8 or uint16) selects the file element type.
    ``names`` maps every foreground id to its tissue name; ids without a
    name get a generated one.
    """

    meta: GridMeta
    labels: np.ndarray
    names: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.shape != self.meta.dims:
            raise GridMismatchError(
                f"labels shape {labels.shape} does not match dims {self.meta.dims}")
        if labels.dtype not in LABEL_DTYPES:
            if labels.size and (labels.min() < 0 or labels.max() > 65535):
                raise ValueError("labels must lie in [0, 65535]")
            if labels.size and not np.array_equal(labels, np.round(labels)):
                raise ValueError("labels must be integers")
            dtype = np.uint8 if (labels.size == 0 or labels.max() <= 255) else np.uint16
            labels = labels.astype(dtype)
        names = {int(k): str(v) for k, v in self.names.items()}
        for lab in np.unique(labels):
            lab = int(lab)
            if lab != 0 and lab not in names:
                names[lab] = f"label_{lab}"
        object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "names", dict(sorted(names.items())))

    def foreground_ids(self) -> list[int]:
        return [int(v) for v in np.unique(self.labels) if v != 0]

    def __eq__(self, other):
        if not isinstance(other, LabelVolume):
            return NotImplemented
        return (self.meta == other.meta and self.labels.dtype == other.labels.dtype
                and np.array_equal(self.labels, other.labels))


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Per-voxel displacement in voxel units of the reference grid.

    The reference voxel ``p`` is mapped to the moving-space coordinate
    ``p + u(p)``. ``vectors`` has shape ``(nx, ny, nz, 3)``.
    """

    meta: GridMeta
    vectors: np.ndarray

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float64)
        if vectors.shape != self.meta.dims + (3,):
            raise GridMismatchError(
                f"field shape {vectors.shape} does not match dims {self.meta.dims}")
        if not np.isfinite(vectors).all():
            raise ValueError("displacements must be finite")
        object.__setattr__(self, "vectors", _frozen(vectors))

    @classmethod
    def zeros(cls, meta: GridMeta) -> "DisplacementField":
        return cls(meta, np.zeros(meta.dims + (3,)))

    def __eq__(self, other):
        if not isinstance(other, DisplacementField):
            return NotImplemented
        return self.meta == other.meta and np.array_equal(self.vectors, other.vectors)


# ---------------------------------------------------------------------------
# sampling

def trilinear_sample(vol: ScalarVolume, coord) -> float:
    """Trilinear value at a continuous voxel coordinate, clamped to the border."""
    return float(trilinear_array(vol.values, np.asarray(coord, dtype=np.float64)[None, :])[0])


def trilinear_array(values: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Vectorized trilinear sampling of ``values`` at ``coords`` (``(..., 3)``).

    Out-of-grid coordinates are clamped to the border voxel, so integer
    in-range coordinates reproduce stored values exactly.
    """
    coords = np.asarray(coords, dtype=np.float64)
    shape = coords.shape[:-1]
    c = coords.reshape(-1, 3)
    idx0 = []
    frac = []
    for axis in range(3):
        n = values.shape[axis]
        x = np.clip(c[:, axis], 0.0, n - 1)
        i0 = np.minimum(np.floor(x).astype(np.intp), max(n - 2, 0))
        idx0.append(i0)
        frac.append(x - i0)
    out = np.zeros(len(c))
    for dx in (0, 1):
        wx = frac[0] if dx else 1.0 - frac[0]
        ix = np.minimum(idx0[0] + dx, values.shape[0] - 1)
        for dy in (0, 1):
            wy = frac[1] if dy else 1.0 - frac[1]
            iy = np.minimum(idx0[1] + dy, values.shape[1] - 1)
            for dz in (0, 1):
                wz = frac[2] if dz else 1.0 - frac[2]
                iz = np.minimum(idx0[2] + dz, values.shape[2] - 1)
                w = wx * wy * wz
                out += np.where(w != 0.0, w * values[ix, iy, iz], 0.0)
    return out.reshape(shape)


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def nearest_array(labels: np.ndarray, coords: np.ndarray) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.float64)
    idx = []
    for axis in range(3):
        r = _round_half_away(coords[..., axis])
        idx.append(np.clip(r, 0, labels.shape[axis] - 1).astype(np.intp))
    return labels[idx[0], idx[1], idx[2]]


def nearest_sample(vol: LabelVolume, coord) -> int:
    """Label of the nearest voxel; ties round half away from zero per axis."""
    return int(nearest_array(vol.labels, np.asarray(coord, dtype=np.float64)))


def voxel_grid(dims) -> np.ndarray:
    """Integer voxel coordinates of a grid, shape ``dims + (3,)``."""
    return np.stack(np.meshgrid(*(np.arange(d, dtype=np.float64) for d in dims),
                                indexing="ij"), axis=-1)


def compute_fractions(water: ScalarVolume, fat: ScalarVolume):
    """Fat and water fractions from the separated signal volumes.

    Voxels without signal get 0 in both outputs.
    """
    check_same_grid(water.meta, fat.meta)
    w = water.values
    f = fat.values
    if (w < 0).any() or (f < 0).any():
        raise ValueError("water and fat signals must be non-negative")
    total = w + f
    nz = total > 0
    ff = np.zeros_like(total)
    wf = np.zeros_like(total)
    ff[nz] = f[nz] / total[nz]
    wf[nz] = w[nz] / total[nz]
    return ScalarVolume(fat.meta, ff), ScalarVolume(water.meta, wf)


# ---------------------------------------------------------------------------
# MetaImage I/O

_HEADER_KEYS = ("ObjectType", "NDims", "DimSize", "ElementNumberOfChannels",
                "ElementType", "ElementSpacing", "Offset", "ElementByteOrderMSB",
                "ElementDataFile")
_ELEMENT_DTYPES = {"MET_FLOAT": "<f4", "MET_UCHAR": "u1", "MET_USHORT": "<u2"}

AnyVolume = Union[ScalarVolume, LabelVolume, DisplacementField]


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def _header(meta: GridMeta, element_type: str, channels: int = 1) -> bytes:
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "DimSize = " + " ".join(str(d) for d in meta.dims),
    ]
    if channels != 1:
        lines.append(f"ElementNumberOfChannels = {channels}")
    lines += [
        f"ElementType = {element_type}",
        "ElementSpacing = " + _fmt(meta.spacing),
        "Offset = " + _fmt(meta.origin),
        "ElementByteOrderMSB = False",
        "ElementDataFile = LOCAL",
    ]
    return ("\n".join(lines) + "\n").encode("ascii")


def label_sidecar(path) -> Path:
    """Path of the ``label_id,name`` CSV written next to a label volume."""
    path = Path(path)
    return path.with_name(path.stem + "_labels.csv")


def write_label_names(names: dict[int, str], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label_id", "name"])
        for k, v in sorted(names.items()):
            w.writerow([k, v])


def read_label_names(path) -> dict[int, str]:
    with open(path, newline="") as fh:
        return {int(row["label_id"]): row["name"] for row in csv.DictReader(fh)}


def write_volume(vol: AnyVolume, path) -> None:
    """Write a volume, label map or displacement field as MetaImage.

    Identical inputs always produce identical bytes. Label maps also get
    a ``<stem>_labels.csv`` dictionary next to the image.
    """
    path = Path(path)
    if isinstance(vol, ScalarVolume):
        header = _header(vol.meta, "MET_FLOAT")
        payload = vol.values.astype("<f4").tobytes(order="F")
    elif isinstance(vol, LabelVolume):
        etype = "MET_UCHAR" if vol.labels.dtype == np.uint8 else "MET_USHORT"
        header = _header(vol.meta, etype)
        payload = vol.labels.astype(_ELEMENT_DTYPES[etype]).tobytes(order="F")
    elif isinstance(vol, DisplacementField):
        header = _header(vol.meta, "MET_FLOAT", channels=3)
        # channel axis fastest, then x, y, z
        payload = np.transpose(vol.vectors, (3, 0, 1, 2)).astype("<f4").tobytes(order="F")
    else:
        raise TypeError(f"cannot write {type(vol).__name__}")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)
    if isinstance(vol, LabelVolume):
        write_label_names(vol.names, label_sidecar(path))


def _parse_header(raw: bytes, path) -> tuple[dict[str, str], int]:
    fields: dict[str, str] = {}
    pos = 0
    while True:
        end = raw.find(b"\n", pos)
        if end < 0:
            raise MetaImageError(f"{path}: header not terminated by ElementDataFile")
        line = raw[pos:end].decode("ascii", errors="replace").strip()
        pos = end + 1
        if not line:
            continue
        if "=" not in line:
            raise MetaImageError(f"{path}: malformed header line {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _HEADER_KEYS:
            raise MetaImageError(f"{path}: unexpected header key {key!r}")
        fields[key] = value
        if key == "ElementDataFile":
            return fields, pos


def read_volume(path) -> AnyVolume:
    """Read a MetaImage file written by :func:`write_volume`.

    MET_FLOAT gives a ScalarVolume (or a DisplacementField when the file
    has three channels); MET_UCHAR and MET_USHORT give a LabelVolume.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such volume file: {path}")
    raw = path.read_bytes()
    fields, offset = _parse_header(raw, path)
    try:
        if fields.get("NDims", "3") != "3":
            raise MetaImageError(f"{path}: only 3D images are supported")
        if fields.get("ElementDataFile") != "LOCAL":
            raise MetaImageError(f"{path}: only ElementDataFile = LOCAL is supported")
        if fields.get("ElementByteOrderMSB", "False") not in ("False", "false", "0"):
            raise MetaImageError(f"{path}: big-endian payloads are not supported")
        dims = tuple(int(v) for v in fields["DimSize"].split())
        spacing = tuple(float(v) for v in fields.get("ElementSpacing", "1 1 1").split())
        origin = tuple(float(v) for v in fields.get("Offset", "0 0 0").split())
        channels = int(fields.get("ElementNumberOfChannels", "1"))
        etype = fields["ElementType"]
    except KeyError as exc:
        raise MetaImageError(f"{path}: missing header key {exc.args[0]}") from None
    if etype not in _ELEMENT_DTYPES:
        raise UnsupportedElementTypeError(f"{path}: unsupported element type {etype}")
    meta = GridMeta(dims, spacing, origin)
    dtype = np.dtype(_ELEMENT_DTYPES[etype])
    expected = meta.size * channels * dtype.itemsize
    payload = raw[offset:]
    if len(payload) != expected:
        raise PayloadSizeError(
            f"{path}: payload has {len(payload)} bytes, DimSize implies {expected}")
    data = np.frombuffer(payload, dtype=dtype)
    if channels == 3:
        if etype != "MET_FLOAT":
            raise UnsupportedElementTypeError(f"{path}: vector fields must be MET_FLOAT")
        vec = data.reshape((3,) + dims, order="F").astype(np.float64)
        return DisplacementField(meta, np.ascontiguousarray(np.moveaxis(vec, 0, -1)))
    if channels != 1:
        raise MetaImageError(f"{path}: unsupported channel count {channels}")
    arr = data.reshape(dims, order="F")
    if etype == "MET_FLOAT":
        return ScalarVolume(meta, arr.astype(np.float64), allow_nan=True)
    sidecar = label_sidecar(path)
    names = read_label_names(sidecar) if sidecar.is_file() else {}
    return LabelVolume(meta, np.ascontiguousarray(arr.astype(dtype.newbyteorder("="))), names)


def read_scalar(path) -> ScalarVolume:
    vol = read_volume(path)
    if not isinstance(vol, ScalarVolume):
        raise MetaImageError(f"{path}: expected a MET_FLOAT scalar volume")
    return vol


def read_labels(path) -> LabelVolume:
    vol = read_volume(path)
    if not isinstance(vol, LabelVolume):
        raise MetaImageError(f"{path}: expected a label volume")
    return vol


def read_field(path) -> DisplacementField:
    vol = read_volume(path)
    if not isinstance(vol, DisplacementField):
        raise MetaImageError(f"{path}: expected a 3-channel displacement field")
    return vol
