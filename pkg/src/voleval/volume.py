"""Voxel data model and mask file formats.

Volumes are dense 3D grids of tissue codes indexed ``[x, y, z]`` with
physical voxel spacing in millimeters. Two on-disk formats are read:

* SEGV, the native little-endian binary format (label map or one-hot
  channel stack), documented in :data:`SEGV_HEADER`.
* NIfTI-1 single-file ``.nii`` / ``.nii.gz`` with an integer datatype;
  ``pixdim[1..3]`` is taken as the spacing and orientation codes are
  ignored.

Loaders are pure functions of the file bytes and never touch the input
file; all returned objects are immutable and safe to share across
worker threads.
"""

from __future__ import annotations

import gzip
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "BACKGROUND",
    "CARTILAGE_TISSUES",
    "LABEL_ALPHABET",
    "TISSUE_LABELS",
    "BinaryMask",
    "LabelVolume",
    "VolumeFormatError",
    "VoxelSpacing",
    "extract_mask",
    "load_volume",
    "save_volume",
]

BACKGROUND = 0
TISSUE_LABELS = {
    1: "femoral_cartilage",
    2: "tibial_cartilage",
    3: "patellar_cartilage",
    4: "meniscus",
}
TISSUE_CODES = {name: code for code, name in TISSUE_LABELS.items()}
CARTILAGE_TISSUES = (1, 2, 3)
LABEL_ALPHABET = (0, 1, 2, 3, 4)

# magic, version, encoding, reserved, nx, ny, nz, nchannels, dx, dy, dz
SEGV_HEADER = struct.Struct("<4sHBBIIIIfff")
SEGV_MAGIC = b"SEGV"
SEGV_VERSION = 1
SEGV_LABEL_MAP = 0
SEGV_ONE_HOT = 1

# One-hot collapse: overlapping channels above this fraction of the
# foreground are treated as a corrupt file rather than a rounding quirk.
ONE_HOT_OVERLAP_TOLERANCE = 1e-3


class VolumeFormatError(ValueError):
    """A mask file violates the format or the label alphabet."""


@dataclass(frozen=True)
class VoxelSpacing:
    """Physical size of one voxel in mm along x, y, z."""

    dx: float
    dy: float
    dz: float

    def __post_init__(self):
        for name, value in (("dx", self.dx), ("dy", self.dy), ("dz", self.dz)):
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"spacing {name}={value!r} must be positive and finite")

    def to_tuple(self) -> tuple[float, float, float]:
        return (self.dx, self.dy, self.dz)

    @property
    def voxel_volume_mm3(self) -> float:
        return (self.dx * self.dy) * self.dz

    def isclose(self, other: "VoxelSpacing", tol: float = 1e-6) -> bool:
        return all(
            abs(a - b) <= tol for a, b in zip(self.to_tuple(), other.to_tuple())
        )


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class LabelVolume:
    """A 3D grid of tissue class codes, indexed ``[x, y, z]``.

    ``through_plane_axis`` names the medial-lateral (slice) direction;
    the stored z axis by default.
    """

    voxels: np.ndarray
    spacing: VoxelSpacing
    through_plane_axis: int = 2

    def __post_init__(self):
        v = np.asarray(self.voxels)
        if v.ndim != 3:
            raise ValueError(f"label volume must be 3D, got shape {v.shape}")
        if any(n <= 0 for n in v.shape):
            raise ValueError(f"all dims must be positive, got {v.shape}")
        if not np.issubdtype(v.dtype, np.integer):
            raise ValueError(f"label codes must be integers, got dtype {v.dtype}")
        bad = (v < 0) | (v > max(LABEL_ALPHABET))
        if bad.any():
            codes = sorted(int(c) for c in np.unique(v[bad]))
            raise VolumeFormatError(f"unknown label codes {codes}; alphabet is {LABEL_ALPHABET}")
        if v.dtype != np.uint8:
            v = v.astype(np.uint8)
        if self.through_plane_axis not in (0, 1, 2):
            raise ValueError(f"through_plane_axis must be 0, 1 or 2, got {self.through_plane_axis}")
        object.__setattr__(self, "voxels", _freeze(np.ascontiguousarray(v)))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape

    def tissues_present(self) -> tuple[int, ...]:
        return tuple(int(c) for c in np.unique(self.voxels) if c != BACKGROUND)


@dataclass(frozen=True)
class BinaryMask:
    """Boolean grid for a single tissue, with the source volume's geometry."""

    voxels: np.ndarray
    spacing: VoxelSpacing
    tissue: int

    def __post_init__(self):
        v = np.asarray(self.voxels)
        if v.ndim != 3:
            raise ValueError(f"mask must be 3D, got shape {v.shape}")
        if v.dtype != np.bool_:
            v = v.astype(bool)
        if self.tissue not in TISSUE_LABELS:
            raise ValueError(f"tissue code {self.tissue} not in alphabet {sorted(TISSUE_LABELS)}")
        object.__setattr__(self, "voxels", _freeze(np.ascontiguousarray(v)))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape

    @property
    def voxel_count(self) -> int:
        return int(np.count_nonzero(self.voxels))

    def is_empty(self) -> bool:
        return not self.voxels.any()


def extract_mask(volume: LabelVolume, tissue: int) -> BinaryMask:
    """Binary mask of one tissue; true exactly where the label equals it."""
    if tissue == BACKGROUND or tissue not in TISSUE_LABELS:
        raise ValueError(
            f"tissue must be a nonzero alphabet code {sorted(TISSUE_LABELS)}, got {tissue}"
        )
    return BinaryMask(volume.voxels == tissue, volume.spacing, tissue)


# ---------------------------------------------------------------------------
# SEGV native format
# ---------------------------------------------------------------------------

def _collapse_one_hot(channels: np.ndarray, path: str) -> np.ndarray:
    """Collapse an (nx, ny, nz, nc) one-hot stack to a label map.

    Channel ``i`` encodes tissue ``i + 1``. Where channels overlap the
    lowest tissue code wins; any overlap is warned about and overlap
    beyond ONE_HOT_OVERLAP_TOLERANCE of the foreground is an error.
    """
    on = channels > 0
    set_count = on.sum(axis=3)
    overlap = int(np.count_nonzero(set_count > 1))
    foreground = int(np.count_nonzero(set_count > 0))
    if overlap:
        if foreground and overlap > ONE_HOT_OVERLAP_TOLERANCE * foreground:
            raise VolumeFormatError(
                f"{path}: one-hot channels overlap on {overlap} of {foreground} "
                "foreground voxels, beyond tolerance"
            )
        warnings.warn(
            f"{path}: one-hot channels overlap on {overlap} voxels; "
            "lowest tissue code kept",
            stacklevel=3,
        )
    labels = np.zeros(on.shape[:3], dtype=np.uint8)
    for c in range(on.shape[3] - 1, -1, -1):
        labels[on[:, :, :, c]] = c + 1
    return labels


def _parse_segv(data: bytes, path: str) -> LabelVolume:
    if len(data) < SEGV_HEADER.size:
        raise VolumeFormatError(f"{path}: truncated SEGV header")
    magic, version, encoding, reserved, nx, ny, nz, nchannels, dx, dy, dz = (
        SEGV_HEADER.unpack_from(data)
    )
    if magic != SEGV_MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {magic!r}")
    if version != SEGV_VERSION:
        raise VolumeFormatError(f"{path}: unsupported SEGV version {version}")
    if encoding not in (SEGV_LABEL_MAP, SEGV_ONE_HOT):
        raise VolumeFormatError(f"{path}: unknown encoding {encoding}")
    if reserved != 0:
        raise VolumeFormatError(f"{path}: reserved byte must be 0, got {reserved}")
    if min(nx, ny, nz, nchannels) <= 0:
        raise VolumeFormatError(f"{path}: non-positive dims {(nx, ny, nz, nchannels)}")
    if encoding == SEGV_LABEL_MAP and nchannels != 1:
        raise VolumeFormatError(f"{path}: label map must have 1 channel, got {nchannels}")
    if encoding == SEGV_ONE_HOT and nchannels > len(TISSUE_LABELS):
        raise VolumeFormatError(
            f"{path}: one-hot stack has {nchannels} channels, alphabet has {len(TISSUE_LABELS)}"
        )
    try:
        spacing = VoxelSpacing(dx, dy, dz)
    except ValueError as exc:
        raise VolumeFormatError(f"{path}: {exc}") from exc
    expect = nx * ny * nz * nchannels
    payload = data[SEGV_HEADER.size:]
    if len(payload) != expect:
        raise VolumeFormatError(
            f"{path}: payload has {len(payload)} bytes, header declares {expect}"
        )
    # x-fastest, then y, then z, then channel
    raw = np.frombuffer(payload, dtype=np.uint8).reshape((nx, ny, nz, nchannels), order="F")
    if encoding == SEGV_LABEL_MAP:
        labels = raw[:, :, :, 0]
    else:
        labels = _collapse_one_hot(raw, path)
    try:
        return LabelVolume(labels, spacing)
    except (ValueError, VolumeFormatError) as exc:
        raise VolumeFormatError(f"{path}: {exc}") from exc


def save_volume(volume: LabelVolume, path: str | Path) -> None:
    """Write a label map as a SEGV file (encoding 0)."""
    nx, ny, nz = volume.dims
    header = SEGV_HEADER.pack(
        SEGV_MAGIC,
        SEGV_VERSION,
        SEGV_LABEL_MAP,
        0,
        nx,
        ny,
        nz,
        1,
        volume.spacing.dx,
        volume.spacing.dy,
        volume.spacing.dz,
    )
    payload = np.asfortranarray(volume.voxels).tobytes(order="F")
    Path(path).write_bytes(header + payload)


# ---------------------------------------------------------------------------
# NIfTI-1 (integer-datatype subset)
# ---------------------------------------------------------------------------

_NIFTI_INT_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
    1024: np.int64,
    1280: np.uint64,
}


def _parse_nifti(data: bytes, path: str) -> LabelVolume:
    if len(data) < 352:
        raise VolumeFormatError(f"{path}: truncated NIfTI-1 header")
    sizeof_hdr = struct.unpack_from("<i", data, 0)[0]
    endian = "<"
    if sizeof_hdr != 348:
        if struct.unpack_from(">i", data, 0)[0] == 348:
            endian = ">"
        else:
            raise VolumeFormatError(f"{path}: not a NIfTI-1 file (sizeof_hdr={sizeof_hdr})")
    magic = struct.unpack_from("4s", data, 344)[0]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise VolumeFormatError(f"{path}: bad NIfTI magic {magic!r}")
    if magic == b"ni1\x00":
        raise VolumeFormatError(f"{path}: two-file NIfTI (.hdr/.img) is not supported")
    dim = struct.unpack_from(f"{endian}8h", data, 40)
    datatype, bitpix = struct.unpack_from(f"{endian}2h", data, 70)
    pixdim = struct.unpack_from(f"{endian}8f", data, 76)
    vox_offset = struct.unpack_from(f"{endian}f", data, 108)[0]

    ndim = dim[0]
    if ndim < 3 or ndim > 7:
        raise VolumeFormatError(f"{path}: dim[0]={ndim} outside the supported 3..7")
    shape = [max(1, dim[i]) for i in range(1, ndim + 1)]
    if any(n > 1 for n in shape[4:]):
        raise VolumeFormatError(f"{path}: >4D payloads are not supported (dims {shape})")
    nx, ny, nz = shape[0], shape[1], shape[2]
    nc = shape[3] if len(shape) > 3 else 1
    if datatype not in _NIFTI_INT_DTYPES:
        raise VolumeFormatError(
            f"{path}: datatype {datatype} is not an integer type; only integer "
            "label volumes are supported"
        )
    dtype = np.dtype(_NIFTI_INT_DTYPES[datatype]).newbyteorder(endian)
    if bitpix != dtype.itemsize * 8:
        raise VolumeFormatError(f"{path}: bitpix {bitpix} disagrees with datatype {datatype}")
    try:
        spacing = VoxelSpacing(float(pixdim[1]), float(pixdim[2]), float(pixdim[3]))
    except ValueError as exc:
        raise VolumeFormatError(f"{path}: {exc}") from exc

    offset = int(vox_offset) if vox_offset else 352
    count = nx * ny * nz * nc
    payload = data[offset : offset + count * dtype.itemsize]
    if len(payload) != count * dtype.itemsize:
        raise VolumeFormatError(f"{path}: payload truncated")
    raw = np.frombuffer(payload, dtype=dtype).reshape((nx, ny, nz, nc), order="F")
    if (raw < 0).any():
        raise VolumeFormatError(f"{path}: negative label codes present")
    raw8 = raw.astype(np.uint8, casting="unsafe")
    if not np.array_equal(raw8, raw):
        raise VolumeFormatError(f"{path}: label codes exceed uint8 range")
    labels = raw8[:, :, :, 0] if nc == 1 else _collapse_one_hot(raw8, path)
    try:
        return LabelVolume(labels, spacing)
    except (ValueError, VolumeFormatError) as exc:
        raise VolumeFormatError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

def load_volume(path: str | Path, format_hint: str | None = None) -> LabelVolume:
    """Load a label volume from a SEGV or NIfTI-1 file.

    The format is sniffed from the file bytes unless ``format_hint``
    ("segv" or "nifti") is given. One-hot inputs are collapsed to a
    label map (lowest tissue code wins on overlap).
    """
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no such volume file: {p}")
    data = p.read_bytes()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    if format_hint is not None:
        hint = format_hint.lower()
        if hint == "segv":
            return _parse_segv(data, str(p))
        if hint in ("nifti", "nii"):
            return _parse_nifti(data, str(p))
        raise ValueError(f"unknown format hint {format_hint!r}")
    if data[:4] == SEGV_MAGIC:
        return _parse_segv(data, str(p))
    if len(data) >= 4 and 348 in struct.unpack_from("<i", data, 0) + struct.unpack_from(">i", data, 0):
        return _parse_nifti(data, str(p))
    raise VolumeFormatError(f"{p}: neither SEGV nor NIfTI-1")
