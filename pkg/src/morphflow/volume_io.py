"""Reading, writing and light preprocessing of scalar volumes.

Arrays are always held in canonical axis order, slowest axis first
(``z, y, x`` for 3D and ``y, x`` for 2D). Two on-disk formats are supported:

* the native format: a raw little-endian payload (``<name>.vol`` for
  intensities and fields, ``<name>.seg`` for labels) next to a JSON sidecar
  ``<name>.vol.json`` / ``<name>.seg.json``;
* uncompressed little-endian NIfTI-1 single files (read only).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "VolumeFormatError",
    "Volume",
    "SegmentationMap",
    "load_volume",
    "save_volume",
    "load_segmentation",
    "save_segmentation",
    "load_field",
    "save_field",
    "normalize_intensity",
    "crop_or_pad",
]

NIFTI_HEADER_SIZE = 348
_NIFTI_DTYPES = {2: np.dtype("<u1"), 4: np.dtype("<i2"), 16: np.dtype("<f4")}
_PAYLOAD_DTYPES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8")}


class VolumeFormatError(ValueError):
    """Raised when a file cannot be decoded into a volume."""


@dataclass
class Volume:
    """Scalar intensity grid with voxel spacing metadata."""

    data: np.ndarray
    spacing: tuple[float, ...] = field(default=None)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.spacing is None:
            self.spacing = (1.0,) * self.data.ndim
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != self.data.ndim:
            raise ValueError("spacing must have one entry per axis")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)


@dataclass
class SegmentationMap:
    """Integer label grid; label 0 is background."""

    labels: np.ndarray
    spacing: tuple[float, ...] = field(default=None)

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise ValueError("labels must be integers")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("labels must be non-negative")
        if self.spacing is None:
            self.spacing = (1.0,) * self.labels.ndim
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.labels.shape

    def __array__(self, dtype=None, copy=None):
        return self.labels if dtype is None else self.labels.astype(dtype)


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def _write_native(path, array: np.ndarray, kind: str, spacing, dtype: np.dtype):
    path = Path(path)
    header = {
        "shape": [int(s) for s in array.shape],
        "spacing": [float(s) for s in spacing],
        "kind": kind,
        "dtype": dtype.name,
    }
    payload = np.ascontiguousarray(array, dtype=dtype.newbyteorder("<"))
    with open(path, "wb") as fh:
        fh.write(payload.tobytes())
    with open(_sidecar(path), "w") as fh:
        json.dump(header, fh)
        fh.write("\n")


def _read_native(path, expect_kind: str):
    path = Path(path)
    try:
        with open(_sidecar(path)) as fh:
            header = json.load(fh)
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"malformed header {_sidecar(path)}: {exc}") from exc
    try:
        shape = tuple(int(s) for s in header["shape"])
        kind = header["kind"]
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError(f"malformed header {_sidecar(path)}") from exc
    if any(s <= 0 for s in shape):
        raise VolumeFormatError(f"malformed header: non-positive shape {shape}")
    if kind != expect_kind:
        raise VolumeFormatError(f"expected kind {expect_kind!r}, file holds {kind!r}")
    if kind == "labels":
        dtype = np.dtype("<i4")
    else:
        name = header.get("dtype", "float32")
        if name not in _PAYLOAD_DTYPES:
            raise VolumeFormatError(f"unsupported element type {name!r}")
        dtype = _PAYLOAD_DTYPES[name]
    raw = path.read_bytes()
    count = int(np.prod(shape))
    if len(raw) != count * dtype.itemsize:
        raise VolumeFormatError(
            f"payload size mismatch: header declares {count} voxels, "
            f"payload holds {len(raw) / dtype.itemsize:g}"
        )
    data = np.frombuffer(raw, dtype=dtype).reshape(shape)
    spacing = tuple(header.get("spacing", (1.0,) * len(shape)))
    return data, spacing


def _read_nifti1(path):
    raw = Path(path).read_bytes()
    if len(raw) < NIFTI_HEADER_SIZE:
        raise VolumeFormatError("malformed header: file shorter than 348 bytes")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != NIFTI_HEADER_SIZE:
        raise VolumeFormatError("malformed header: sizeof_hdr != 348 (big-endian files unsupported)")
    dim = struct.unpack_from("<8h", raw, 40)
    datatype, bitpix = struct.unpack_from("<2h", raw, 70)
    pixdim = struct.unpack_from("<8f", raw, 76)
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    ndim = dim[0]
    if not 1 <= ndim <= 7 or any(d <= 0 for d in dim[1 : ndim + 1]):
        raise VolumeFormatError(f"malformed header: dim = {dim}")
    if datatype not in _NIFTI_DTYPES:
        raise VolumeFormatError(f"unsupported element type: datatype {datatype}")
    dtype = _NIFTI_DTYPES[datatype]
    if bitpix != 8 * dtype.itemsize:
        raise VolumeFormatError(f"malformed header: bitpix {bitpix} for datatype {datatype}")
    # NIfTI stores x fastest, so reversed dims give slowest-first order
    shape = tuple(reversed(dim[1 : ndim + 1]))
    offset = int(vox_offset) if vox_offset >= NIFTI_HEADER_SIZE else NIFTI_HEADER_SIZE
    count = int(np.prod(shape))
    payload = raw[offset:]
    if len(payload) != count * dtype.itemsize:
        raise VolumeFormatError(
            f"payload size mismatch: header declares {count} voxels, "
            f"payload holds {len(payload) / dtype.itemsize:g}"
        )
    data = np.frombuffer(payload, dtype=dtype).reshape(shape)
    spacing = tuple(abs(p) or 1.0 for p in reversed(pixdim[1 : ndim + 1]))
    return data, spacing


def load_volume(path, format: str = "native", dtype=np.float64) -> Volume:
    """Load an intensity volume, widened to ``dtype``.

    Raises :class:`VolumeFormatError` on malformed headers, size mismatches,
    unsupported element types and non-finite voxels.
    """
    if format == "native":
        data, spacing = _read_native(path, "intensity")
    elif format == "nifti1":
        data, spacing = _read_nifti1(path)
    else:
        raise ValueError(f"unknown format {format!r}")
    data = data.astype(dtype)
    if not np.all(np.isfinite(data)):
        raise VolumeFormatError(f"non-finite values in {path}")
    return Volume(data, spacing)


def save_volume(v, path, format: str = "native") -> None:
    """Write an intensity volume in the native format.

    float64 arrays are written with a float64 payload so that the round trip
    stays bit-exact; everything else is stored as float32.
    """
    if format != "native":
        raise ValueError("only the native format can be written")
    if not isinstance(v, Volume):
        v = Volume(np.asarray(v))
    dtype = np.dtype("<f8") if v.data.dtype == np.float64 else np.dtype("<f4")
    _write_native(path, v.data, "intensity", v.spacing, dtype)


def load_segmentation(path, format: str = "native") -> SegmentationMap:
    if format == "native":
        data, spacing = _read_native(path, "labels")
    elif format == "nifti1":
        data, spacing = _read_nifti1(path)
        if not np.issubdtype(data.dtype, np.integer):
            if not np.all(data == np.round(data)):
                raise VolumeFormatError("label file holds non-integer values")
    else:
        raise ValueError(f"unknown format {format!r}")
    return SegmentationMap(data.astype(np.int32), spacing)


def save_segmentation(s, path) -> None:
    if not isinstance(s, SegmentationMap):
        s = SegmentationMap(np.asarray(s))
    _write_native(path, s.labels, "labels", s.spacing, np.dtype("<i4"))


def load_field(path, dtype=np.float64) -> np.ndarray:
    """Load a displacement field stored as an ``(n, *shape)`` array."""
    data, _ = _read_native(path, "field")
    data = data.astype(dtype)
    if data.ndim < 2 or data.shape[0] != data.ndim - 1:
        raise VolumeFormatError(f"field shape {data.shape} is not (n, *n-D shape)")
    if not np.all(np.isfinite(data)):
        raise VolumeFormatError(f"non-finite values in {path}")
    return data


def save_field(u, path) -> None:
    u = np.asarray(u)
    if u.shape[0] != u.ndim - 1:
        raise ValueError(f"field shape {u.shape} is not (n, *n-D shape)")
    dtype = np.dtype("<f8") if u.dtype == np.float64 else np.dtype("<f4")
    _write_native(path, u, "field", (1.0,) * u.ndim, dtype)


def normalize_intensity(v):
    """Min-max rescale to [0, 1]; a constant input maps to zeros."""
    data = np.asarray(v, dtype=float)
    lo, hi = data.min(), data.max()
    if hi == lo:
        out = np.zeros_like(data)
    else:
        out = np.clip((data - lo) / (hi - lo), 0.0, 1.0)
    if isinstance(v, Volume):
        return Volume(out, v.spacing)
    return out


def crop_or_pad(v, target_shape: Sequence[int]):
    """Center-crop or zero-pad each axis to ``target_shape``.

    On odd differences the extra voxel is taken from (or added to) the high
    side, so padding then cropping back is the identity.
    """
    data = np.asarray(v)
    target_shape = tuple(int(t) for t in target_shape)
    if len(target_shape) != data.ndim:
        raise ValueError("target_shape rank differs from volume rank")
    if any(t <= 0 for t in target_shape):
        raise ValueError("target dims must be positive")
    out = np.zeros(target_shape, dtype=data.dtype)
    src, dst = [], []
    for n, t in zip(data.shape, target_shape):
        if n >= t:
            lo = (n - t) // 2
            src.append(slice(lo, lo + t))
            dst.append(slice(0, t))
        else:
            lo = (t - n) // 2
            src.append(slice(0, n))
            dst.append(slice(lo, lo + n))
    out[tuple(dst)] = data[tuple(src)]
    if isinstance(v, Volume):
        return Volume(out, v.spacing)
    if isinstance(v, SegmentationMap):
        return SegmentationMap(out, v.spacing)
    return out
