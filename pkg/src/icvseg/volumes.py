"""Volume data model, NIfTI-1 subset I/O, and intensity utilities.

Supported interchange format: single-file uncompressed NIfTI-1 (348-byte
header, int16 or float32, 3-D, little endian), with a sidecar ``.meta``
text file of ``key=value`` lines carrying ``patient_id``, ``orientation``,
``role`` (image|mask), and for reference masks ``annotated_slices`` as a
comma-separated list. The through-plane axis is always the third array
axis; the orientation tag is experiment metadata, not a resampling hint.

Spacing is stored as float32 in the file header, so Volume/AnnotatedMask
quantize spacing to float32 at construction to keep round trips exact.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ShapeError

ORIENTATIONS = ("axial", "coronal", "sagittal")

_DTYPE_CODES = {4: np.dtype("<i2"), 16: np.dtype("<f4")}
_DTYPE_BITS = {4: 16, 16: 32}

__all__ = [
    "ORIENTATIONS",
    "Volume",
    "AnnotatedMask",
    "DatasetSplit",
    "read_volume",
    "write_volume",
    "read_annotated_mask",
    "write_annotated_mask",
    "read_sidecar",
    "write_sidecar",
    "sidecar_path",
    "extract_slice",
    "normalize_intensity",
    "select_annotated_slices",
    "nonzero_slice_range",
]


def _f32_spacing(spacing):
    vals = tuple(float(np.float32(s)) for s in spacing)
    if len(vals) != 3 or any(v <= 0 for v in vals):
        raise ShapeError(f"spacing must be three positive values, got {spacing}")
    return vals


@dataclass
class Volume:
    """3-D scalar image with voxel spacing (mm) and acquisition metadata."""

    data: np.ndarray
    spacing: tuple
    orientation: str = "unknown"
    patient_id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ShapeError(f"volume data must be 3-D, got shape {self.data.shape}")
        self.spacing = _f32_spacing(self.spacing)
        if self.orientation not in ORIENTATIONS + ("unknown",):
            raise ShapeError(f"unknown orientation tag {self.orientation!r}")

    @property
    def shape(self):
        return self.data.shape


@dataclass
class AnnotatedMask:
    """Binary labels defined on a sparse set of through-plane slices.

    Every nonzero voxel must lie on an annotated slice; the default
    annotation protocol marks 10 equidistant slices.
    """

    data: np.ndarray
    annotated_slices: tuple
    spacing: tuple
    orientation: str = "unknown"
    patient_id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ShapeError(f"mask data must be 3-D, got shape {self.data.shape}")
        if not np.all((self.data == 0) | (self.data == 1)):
            raise ShapeError("mask voxels must be binary")
        self.data = self.data.astype(np.uint8, copy=False)
        self.spacing = _f32_spacing(self.spacing)
        slices = tuple(sorted(set(int(s) for s in self.annotated_slices)))
        nz = self.data.shape[2]
        if any(s < 0 or s >= nz for s in slices):
            raise ShapeError(f"annotated slices {slices} outside [0, {nz})")
        self.annotated_slices = slices
        occupied = np.flatnonzero(self.data.any(axis=(0, 1)))
        stray = set(occupied.tolist()) - set(slices)
        if stray:
            raise ShapeError(
                f"mask has nonzero voxels on non-annotated slices {sorted(stray)}"
            )

    @property
    def shape(self):
        return self.data.shape


@dataclass
class DatasetSplit:
    """Patient-level split; a patient's scans never straddle the boundary."""

    train_patients: tuple
    test_patients: tuple

    def __post_init__(self):
        overlap = set(self.train_patients) & set(self.test_patients)
        if overlap:
            raise ShapeError(f"patients in both splits: {sorted(overlap)}")


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".meta")


def write_sidecar(path, entries: dict) -> None:
    lines = [f"{k}={entries[k]}" for k in entries]
    Path(path).write_text("\n".join(lines) + "\n")


def read_sidecar(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"malformed sidecar line in {path}: {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _write_nii(path, data: np.ndarray, spacing) -> None:
    if data.dtype == np.int16:
        code = 4
    elif data.dtype == np.float32:
        code = 16
    else:
        raise DataError(f"unsupported datatype {data.dtype}; use int16 or float32")
    x, y, z = data.shape
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, x, y, z, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, code)
    struct.pack_into("<h", hdr, 72, _DTYPE_BITS[code])
    sx, sy, sz = (np.float32(s) for s in spacing)
    struct.pack_into("<8f", hdr, 76, 1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<f", hdr, 112, 1.0)  # scl_slope
    struct.pack_into("<f", hdr, 116, 0.0)  # scl_inter
    struct.pack_into("<4s", hdr, 344, b"n+1\x00")
    with open(path, "wb") as f:
        f.write(hdr)
        f.write(b"\x00\x00\x00\x00")  # no extensions
        f.write(np.ascontiguousarray(data.T).tobytes())  # x fastest on disk


def _read_nii(path):
    blob = Path(path).read_bytes()
    if blob[:2] == b"\x1f\x8b":
        raise DataError(f"{path} is gzip-compressed; only uncompressed NIfTI-1 is supported")
    if len(blob) < 352:
        raise DataError(f"{path} is truncated (no complete NIfTI-1 header)")
    (sizeof_hdr,) = struct.unpack_from("<i", blob, 0)
    if sizeof_hdr != 348:
        raise DataError(
            f"{path} is not a little-endian NIfTI-1 file (sizeof_hdr={sizeof_hdr})"
        )
    (magic,) = struct.unpack_from("<4s", blob, 344)
    if magic not in (b"n+1\x00",):
        raise DataError(f"{path} has unsupported NIfTI magic {magic!r}; single-file n+1 required")
    dim = struct.unpack_from("<8h", blob, 40)
    if dim[0] != 3:
        raise DataError(f"{path} is {dim[0]}-D; only 3-D volumes are supported")
    (code,) = struct.unpack_from("<h", blob, 70)
    if code not in _DTYPE_CODES:
        raise DataError(f"{path} has unsupported NIfTI datatype code {code}")
    pixdim = struct.unpack_from("<8f", blob, 76)
    (vox_offset,) = struct.unpack_from("<f", blob, 108)
    offset = int(vox_offset)
    x, y, z = dim[1], dim[2], dim[3]
    dtype = _DTYPE_CODES[code]
    nbytes = x * y * z * dtype.itemsize
    if offset + nbytes > len(blob):
        raise DataError(f"{path} data section is truncated")
    data = np.frombuffer(blob, dtype=dtype, count=x * y * z, offset=offset)
    data = data.reshape((z, y, x)).T.copy()  # back to (x, y, z), x fastest on disk
    return data, (pixdim[1], pixdim[2], pixdim[3])


def write_volume(path, volume: Volume, role: str = "image") -> None:
    """Write the volume plus its metadata sidecar."""
    _write_nii(path, volume.data, volume.spacing)
    write_sidecar(sidecar_path(path), {
        "patient_id": volume.patient_id,
        "orientation": volume.orientation,
        "role": role,
    })


def read_volume(path) -> Volume:
    """Read a NIfTI volume; metadata comes from the sidecar when present."""
    data, spacing = _read_nii(path)
    meta = {}
    sp = sidecar_path(path)
    if sp.exists():
        meta = read_sidecar(sp)
    return Volume(
        data=data,
        spacing=spacing,
        orientation=meta.get("orientation", "unknown"),
        patient_id=meta.get("patient_id", Path(path).stem),
    )


def write_annotated_mask(path, mask: AnnotatedMask) -> None:
    _write_nii(path, mask.data.astype(np.int16), mask.spacing)
    write_sidecar(sidecar_path(path), {
        "patient_id": mask.patient_id,
        "orientation": mask.orientation,
        "role": "mask",
        "annotated_slices": ",".join(str(s) for s in mask.annotated_slices),
    })


def read_annotated_mask(path) -> AnnotatedMask:
    data, spacing = _read_nii(path)
    sp = sidecar_path(path)
    if not sp.exists():
        raise DataError(f"reference mask {path} is missing its annotation sidecar {sp}")
    meta = read_sidecar(sp)
    if "annotated_slices" not in meta:
        raise DataError(f"sidecar {sp} lacks the annotated_slices entry")
    slices = tuple(int(s) for s in meta["annotated_slices"].split(",") if s.strip() != "")
    if not slices:
        raise DataError(f"sidecar {sp} declares no annotated slices")
    return AnnotatedMask(
        data=(np.asarray(data) != 0).astype(np.uint8),
        annotated_slices=slices,
        spacing=spacing,
        orientation=meta.get("orientation", "unknown"),
        patient_id=meta.get("patient_id", Path(path).stem),
    )


def extract_slice(volume, index: int) -> np.ndarray:
    """In-plane 2-D array at through-plane position ``index`` (third axis)."""
    data = volume.data if isinstance(volume, Volume) else np.asarray(volume)
    if not 0 <= index < data.shape[2]:
        raise ShapeError(f"slice index {index} outside [0, {data.shape[2]})")
    return data[:, :, index]


def normalize_intensity(volume: Volume, support=None) -> Volume:
    """Affine rescale to zero mean, unit variance over the support voxels.

    The support defaults to voxels strictly above zero (the background of a
    padded field of view is zero-dominated); all voxels, including zeros,
    are mapped through the same affine. Pass the original support to
    re-normalize an already normalized volume idempotently.
    """
    data = volume.data.astype(np.float64, copy=False)
    if support is None:
        support = data > 0
    else:
        support = np.asarray(support, dtype=bool)
        if support.shape != data.shape:
            raise ShapeError(
                f"support shape {support.shape} does not match volume {data.shape}"
            )
    vals = data[support]
    if vals.size == 0:
        raise DataError("cannot normalize: no voxels above zero")
    mean = vals.mean()
    var = vals.var()
    if var < 1e-12:
        raise DataError("cannot normalize: support intensity variance is ~0")
    out = ((data - mean) / np.sqrt(var)).astype(np.float32)
    return Volume(data=out, spacing=volume.spacing, orientation=volume.orientation,
                  patient_id=volume.patient_id)


def nonzero_slice_range(mask_data) -> tuple:
    """(first, last) through-plane indices carrying any nonzero voxel."""
    occupied = np.flatnonzero(np.asarray(mask_data).any(axis=(0, 1)))
    if occupied.size == 0:
        raise DataError("mask has no nonzero voxels")
    return int(occupied[0]), int(occupied[-1])


def select_annotated_slices(extent: int, count: int = 10, z_range=None) -> tuple:
    """Equidistant slice indices over ``z_range`` (inclusive), rounded to the
    nearest integer and deduplicated in order. ``z_range`` defaults to the
    whole extent. ``count`` of 1 picks the midpoint of the range."""
    if count < 1:
        raise ShapeError(f"count must be >= 1, got {count}")
    if count > extent:
        raise ShapeError(f"cannot select {count} slices from extent {extent}")
    lo, hi = (0, extent - 1) if z_range is None else (int(z_range[0]), int(z_range[1]))
    if not (0 <= lo <= hi < extent):
        raise ShapeError(f"z_range ({lo}, {hi}) invalid for extent {extent}")
    if count == 1:
        return (int(round((lo + hi) / 2)),)
    idx = np.rint(np.linspace(lo, hi, count)).astype(int)
    seen = []
    for i in idx.tolist():
        if i not in seen:
            seen.append(i)
    return tuple(seen)
