"""Core volumetric data types, minimal NIfTI-1 I/O, normalization, case loading.

All volumes live on dense 3D grids with voxel spacing in millimeters. The
canonical linear voxel order throughout the package is x-fastest, i.e. the
flat index of voxel (x, y, z) is ``x + nx*(y + ny*z)``. Arrays are stored
with shape ``(nx, ny, nz)`` so that Fortran-order raveling yields exactly
that sequence.
"""

from __future__ import annotations

import enum
import gzip
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ChannelDimsMismatch,
    EmptyForeground,
    IoFailure,
    MalformedHeader,
    MissingChannel,
    TruncatedFile,
    UnsupportedDatatype,
)


class SequenceId(enum.Enum):
    """The four MRI pulse sequences, in canonical channel-stacking order."""

    T1 = "t1"
    T1C = "t1c"
    T2 = "t2"
    FLAIR = "flair"

    @classmethod
    def canonical_order(cls) -> tuple["SequenceId", ...]:
        return (cls.T1, cls.T1C, cls.T2, cls.FLAIR)


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Volume3:
    """Dense 3D scalar grid. ``data`` has shape (nx, ny, nz), float64."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"volume data must be 3D with positive dims, got shape {arr.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be three positive reals, got {self.spacing}")
        object.__setattr__(self, "data", _freeze(arr))
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def values(self) -> np.ndarray:
        """Flat voxel values in canonical x-fastest order."""
        return self.data.ravel(order="F")


@dataclass(frozen=True, eq=False)
class LabelMask:
    """Binary mask on the same grid convention as Volume3; 1 marks the cavity."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"mask data must be 3D with positive dims, got shape {arr.shape}")
        if not np.isin(arr, (0, 1)).all():
            raise ValueError("mask values must be exactly 0 or 1")
        spacing = tuple(float(s) for s in self.spacing)
        object.__setattr__(self, "data", _freeze(arr.astype(np.uint8)))
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def count(self) -> int:
        return int(self.data.sum())


@dataclass(frozen=True, eq=False)
class Case:
    """One acquisition: four co-registered channels plus an optional cavity mask."""

    case_id: str
    patient_id: str
    timepoint: int
    channels: dict[SequenceId, Volume3]
    mask: LabelMask | None = None

    def __post_init__(self):
        if self.timepoint < 0:
            raise ValueError("timepoint must be non-negative")
        missing = [s.value for s in SequenceId if s not in self.channels]
        if missing:
            raise MissingChannel(f"case {self.case_id!r} lacks channels: {missing}")
        ref = next(iter(self.channels.values()))
        for seq, vol in self.channels.items():
            if vol.dims != ref.dims or vol.spacing != ref.spacing:
                raise ChannelDimsMismatch(
                    f"case {self.case_id!r}: channel {seq.value} has dims {vol.dims} "
                    f"spacing {vol.spacing}, expected {ref.dims} / {ref.spacing}"
                )
        if self.mask is not None and self.mask.dims != ref.dims:
            raise ChannelDimsMismatch(
                f"case {self.case_id!r}: mask dims {self.mask.dims} != channel dims {ref.dims}"
            )

    @property
    def dims(self) -> tuple[int, int, int]:
        return next(iter(self.channels.values())).dims


# ---------------------------------------------------------------------------
# NIfTI-1 (single-file, little-endian, uint8/int16/float32)

_HDR_SIZE = 348
_VOX_OFFSET = 352
_DTYPE_CODES = {2: np.uint8, 4: np.int16, 16: np.float32}
_GZIP_MAGIC = b"\x1f\x8b"


def _open_for_read(path: Path):
    with open(path, "rb") as probe:
        head = probe.read(2)
    if head == _GZIP_MAGIC:
        return gzip.open(path, "rb")
    return open(path, "rb")


def load_nifti(path: str | Path) -> Volume3:
    """Read a single-file NIfTI-1 volume (optionally gzipped) into a Volume3.

    Only the minimal carrier subset is supported: magic ``n+1``, little-endian,
    datatypes uint8/int16/float32, three spatial dims. Scaling fields
    (scl_slope/scl_inter) and orientation are ignored; voxel values are
    returned as stored, spacing is taken from pixdim[1..3].
    """
    path = Path(path)
    try:
        with _open_for_read(path) as fh:
            header = fh.read(_HDR_SIZE)
            if len(header) < _HDR_SIZE:
                raise MalformedHeader(f"{path}: file shorter than the 348-byte header")
            (sizeof_hdr,) = struct.unpack_from("<i", header, 0)
            if sizeof_hdr != _HDR_SIZE:
                raise MalformedHeader(f"{path}: sizeof_hdr = {sizeof_hdr}, expected 348")
            magic = header[344:348]
            if magic != b"n+1\x00":
                raise MalformedHeader(f"{path}: magic {magic!r} is not the single-file form")
            dim = struct.unpack_from("<8h", header, 40)
            if dim[0] != 3:
                raise MalformedHeader(f"{path}: dim[0] = {dim[0]}, only 3D volumes supported")
            nx, ny, nz = dim[1], dim[2], dim[3]
            if min(nx, ny, nz) < 1:
                raise MalformedHeader(f"{path}: non-positive dims {(nx, ny, nz)}")
            (datatype,) = struct.unpack_from("<h", header, 70)
            if datatype not in _DTYPE_CODES:
                raise UnsupportedDatatype(f"{path}: datatype code {datatype} not supported")
            dtype = np.dtype(_DTYPE_CODES[datatype]).newbyteorder("<")
            pixdim = struct.unpack_from("<8f", header, 76)
            (vox_offset,) = struct.unpack_from("<f", header, 108)
            offset = int(vox_offset)
            if offset < _HDR_SIZE:
                raise MalformedHeader(f"{path}: vox_offset {vox_offset} below header size")
            fh.read(offset - _HDR_SIZE)
            need = nx * ny * nz * dtype.itemsize
            payload = fh.read(need)
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if len(payload) < need:
        raise TruncatedFile(f"{path}: expected {need} data bytes, found {len(payload)}")
    values = np.frombuffer(payload, dtype=dtype)
    data = values.reshape((nx, ny, nz), order="F").astype(np.float64)
    spacing = tuple(float(p) if p > 0 else 1.0 for p in pixdim[1:4])
    return Volume3(data=data, spacing=spacing)


def _nifti_header(dims, spacing, datatype_code, bitpix) -> bytes:
    hdr = bytearray(_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _HDR_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, dims[0], dims[1], dims[2], 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, datatype_code)
    struct.pack_into("<h", hdr, 72, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, spacing[0], spacing[1], spacing[2], 0, 0, 0, 0)
    struct.pack_into("<f", hdr, 108, float(_VOX_OFFSET))
    struct.pack_into("<f", hdr, 112, 1.0)  # scl_slope
    struct.pack_into("<f", hdr, 116, 0.0)  # scl_inter
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr) + b"\x00\x00\x00\x00"  # four-byte extender, data at 352


def save_nifti(volume: Volume3 | LabelMask, path: str | Path) -> None:
    """Write a volume as single-file NIfTI-1 (gzipped when the path ends in .gz).

    Volume3 is written as little-endian float32, LabelMask as uint8. Spacing
    is preserved in pixdim[1..3]; ``load_nifti`` inverts the float32 form
    bit-exactly for float32-representable values.
    """
    path = Path(path)
    if isinstance(volume, LabelMask):
        code, bits, payload = 2, 8, volume.data.ravel(order="F").tobytes()
    else:
        code, bits = 16, 32
        payload = volume.data.astype("<f4").ravel(order="F").tobytes()
    blob = _nifti_header(volume.dims, volume.spacing, code, bits) + payload
    try:
        if path.suffix == ".gz":
            # mtime=0 and no embedded filename keep the bytes reproducible
            with open(path, "wb") as raw:
                with gzip.GzipFile(fileobj=raw, mode="wb", compresslevel=4, mtime=0) as fh:
                    fh.write(blob)
        else:
            path.write_bytes(blob)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_mask(path: str | Path) -> LabelMask:
    """Read a NIfTI file whose voxels must all be 0 or 1."""
    vol = load_nifti(path)
    if not np.isin(vol.data, (0.0, 1.0)).all():
        raise ValueError(f"{path}: mask voxels must be exactly 0 or 1")
    return LabelMask(data=vol.data.astype(np.uint8), spacing=vol.spacing)


# ---------------------------------------------------------------------------
# normalization

def znormalize(volume: Volume3, eps: float = 1e-8) -> Volume3:
    """Z-score the nonzero voxels; exact zeros (stripped background) stay zero.

    The nonzero set is normalized to mean 0 and population standard deviation 1,
    guarded by ``eps`` against zero variance (a constant nonzero volume maps
    to all zeros over its foreground).
    """
    data = volume.data
    fg = data != 0.0
    if not fg.any():
        raise EmptyForeground("cannot normalize an all-zero volume")
    vals = data[fg]
    mean = vals.mean()
    std = np.sqrt(vals.var() + eps)
    out = np.zeros_like(data)
    out[fg] = (vals - mean) / std
    return Volume3(data=out, spacing=volume.spacing)


# ---------------------------------------------------------------------------
# manifests and case loading

_CHANNEL_KEYS = {SequenceId.T1: "t1", SequenceId.T1C: "t1c", SequenceId.T2: "t2", SequenceId.FLAIR: "flair"}


@dataclass(frozen=True)
class ManifestEntry:
    """Descriptor of one case: identity plus per-channel file paths."""

    case_id: str
    patient_id: str
    timepoint: int
    channel_paths: dict[SequenceId, str]
    mask_path: str | None = None
    normalize: bool = True
    base_dir: Path = field(default_factory=Path)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.base_dir / p


def save_manifest(entries: list[ManifestEntry], path: str | Path) -> None:
    rows = []
    for e in entries:
        row = {
            "case_id": e.case_id,
            "patient_id": e.patient_id,
            "timepoint": e.timepoint,
            **{key: e.channel_paths[seq] for seq, key in _CHANNEL_KEYS.items()},
            "mask": e.mask_path,
            "normalize": e.normalize,
        }
        rows.append(row)
    path = Path(path)
    try:
        path.write_text(json.dumps(rows, indent=2) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write manifest {path}: {exc}") from exc


def load_manifest(path: str | Path) -> list[ManifestEntry]:
    """Parse a JSON manifest; paths are resolved relative to the manifest file."""
    path = Path(path)
    try:
        rows = json.loads(path.read_text())
    except OSError as exc:
        raise IoFailure(f"cannot read manifest {path}: {exc}") from exc
    if not isinstance(rows, list):
        raise ValueError(f"{path}: manifest must be a JSON array")
    entries = []
    seen = set()
    for row in rows:
        channel_paths = {}
        for seq, key in _CHANNEL_KEYS.items():
            rel = row.get(key)
            if not rel:
                raise MissingChannel(f"{path}: case {row.get('case_id')!r} lacks channel {key!r}")
            channel_paths[seq] = rel
        entry = ManifestEntry(
            case_id=str(row["case_id"]),
            patient_id=str(row["patient_id"]),
            timepoint=int(row.get("timepoint", 0)),
            channel_paths=channel_paths,
            mask_path=row.get("mask") or None,
            normalize=bool(row.get("normalize", True)),
            base_dir=path.parent,
        )
        if entry.case_id in seen:
            raise ValueError(f"{path}: duplicate case_id {entry.case_id!r}")
        seen.add(entry.case_id)
        entries.append(entry)
    return entries


def load_case(entry: ManifestEntry) -> Case:
    """Load all four channels (and the mask, if listed) described by one entry.

    Channels are z-normalized when the entry's ``normalize`` flag is set.
    Raises ChannelDimsMismatch before constructing any inconsistent Case.
    """
    channels = {}
    for seq in SequenceId.canonical_order():
        vol = load_nifti(entry.resolve(entry.channel_paths[seq]))
        if entry.normalize:
            vol = znormalize(vol)
        channels[seq] = vol
    mask = load_mask(entry.resolve(entry.mask_path)) if entry.mask_path else None
    return Case(
        case_id=entry.case_id,
        patient_id=entry.patient_id,
        timepoint=entry.timepoint,
        channels=channels,
        mask=mask,
    )
