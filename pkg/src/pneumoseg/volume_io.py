"""CT volume / label mask containers and their on-disk format.

Both file kinds share a fixed 128-byte little-endian header followed by raw
voxel data in slice-major (C) order::

    offset  size  field
    0       8     magic (b"PNSVOL01" volume, b"PNSMSK01" mask)
    8       1     dtype code (1 = int16, 2 = uint8)
    9       3     reserved, zero
    12      12    shape, 3 x uint32 (slices, rows, cols)
    24      24    spacing, 3 x float64 mm (dz, dy, dx); zeros in mask files
    48      4     flags, uint32 (bit 0: mask file carries a lung mask)
    52      64    patient id, UTF-8, NUL padded
    116     12    reserved, zero

Volumes store HU as int16. Masks store labels as uint8, followed by the
optional lung mask (uint8 0/1) of the same shape when flag bit 0 is set.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HU_MIN = -3024
HU_MAX = 3071

BACKGROUND, GGO, HIGH_OPACITY = 0, 1, 2
CLASS_CODES = (BACKGROUND, GGO, HIGH_OPACITY)
CLASS_NAMES = {BACKGROUND: "background", GGO: "ggo", HIGH_OPACITY: "high_opacity"}

VOLUME_MAGIC = b"PNSVOL01"
MASK_MAGIC = b"PNSMSK01"
HEADER_SIZE = 128
_HEADER = struct.Struct("<8sB3x3I3dI64s12x")
assert _HEADER.size == HEADER_SIZE

_DTYPES = {1: np.dtype("<i2"), 2: np.dtype("u1")}
_FLAG_LUNG = 1


class VolumeFormatError(ValueError):
    """Raised when a file or in-memory object violates the container contract."""


def _check_spacing(spacing) -> tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3:
        raise VolumeFormatError(f"spacing must have 3 components, got {spacing}")
    if not all(math.isfinite(s) and s > 0 for s in spacing):
        raise VolumeFormatError(f"non-positive spacing {spacing}")
    return spacing


@dataclass(frozen=True, eq=False)
class CtVolume:
    voxels: np.ndarray
    spacing: tuple[float, float, float]
    patient_id: str = ""

    def __post_init__(self):
        vox = np.asarray(self.voxels)
        if vox.ndim != 3 or min(vox.shape) < 1:
            raise VolumeFormatError(f"volume must be 3D with every dimension >= 1, got {vox.shape}")
        if vox.size and (vox.min() < HU_MIN or vox.max() > HU_MAX):
            raise VolumeFormatError(
                f"HU out of range [{HU_MIN}, {HU_MAX}]: min={vox.min()}, max={vox.max()}"
            )
        if not np.issubdtype(vox.dtype, np.integer):
            if not np.array_equal(vox, np.round(vox)):
                raise VolumeFormatError("HU values must be integer-valued")
        vox = vox.astype(np.int16, copy=True)
        vox.flags.writeable = False
        object.__setattr__(self, "voxels", vox)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape


@dataclass(frozen=True, eq=False)
class LabelMask:
    labels: np.ndarray
    lung: np.ndarray | None = None

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise VolumeFormatError(f"mask must be 3D, got shape {labels.shape}")
        bad = ~np.isin(labels, CLASS_CODES)
        if bad.any():
            codes = sorted(set(np.unique(labels[bad]).tolist()))
            raise VolumeFormatError(f"unknown class code(s) {codes}")
        labels = labels.astype(np.uint8, copy=True)
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)
        if self.lung is not None:
            lung = np.asarray(self.lung)
            if lung.shape != labels.shape:
                raise VolumeFormatError(
                    f"lung mask shape mismatch: {lung.shape} vs labels {labels.shape}"
                )
            lung = lung.astype(bool, copy=True)
            lung.flags.writeable = False
            object.__setattr__(self, "lung", lung)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.labels.shape

    def __eq__(self, other):
        if not isinstance(other, LabelMask):
            return NotImplemented
        if not np.array_equal(self.labels, other.labels):
            return False
        if (self.lung is None) != (other.lung is None):
            return False
        return self.lung is None or np.array_equal(self.lung, other.lung)


@dataclass
class Dataset:
    records: list[tuple[str, Path, Path]]
    manifest_path: Path | None = None

    def __post_init__(self):
        ids = [r[0] for r in self.records]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise VolumeFormatError(f"duplicate patient ids in dataset: {dupes}")

    @property
    def patient_ids(self) -> list[str]:
        return [r[0] for r in self.records]

    def record(self, patient_id: str) -> tuple[str, Path, Path]:
        for rec in self.records:
            if rec[0] == patient_id:
                return rec
        raise KeyError(patient_id)

    def __len__(self):
        return len(self.records)


def voxel_volume_ml(spacing) -> float:
    """Volume of one voxel in millilitres (1 mL = 1000 mm^3)."""
    dz, dy, dx = _check_spacing(spacing)
    return dz * dy * dx / 1000.0


def _pack_header(magic, dtype_code, shape, spacing, flags, patient_id) -> bytes:
    pid = patient_id.encode("utf-8")
    if len(pid) > 64:
        raise VolumeFormatError(f"patient id longer than 64 bytes: {patient_id!r}")
    return _HEADER.pack(magic, dtype_code, *shape, *spacing, flags, pid)


def _read_header(path: Path, magic: bytes):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    raw = path.read_bytes()
    if len(raw) < HEADER_SIZE:
        raise VolumeFormatError(f"{path}: malformed header (file is {len(raw)} bytes)")
    got_magic, dtype_code, d, h, w, sz, sy, sx, flags, pid = _HEADER.unpack_from(raw)
    if got_magic != magic:
        raise VolumeFormatError(f"{path}: malformed header (bad magic {got_magic!r})")
    if dtype_code not in _DTYPES:
        raise VolumeFormatError(f"{path}: malformed header (unknown dtype code {dtype_code})")
    return raw, _DTYPES[dtype_code], (d, h, w), (sz, sy, sx), flags, pid.rstrip(b"\0").decode("utf-8")


def _payload(raw: bytes, offset: int, dtype: np.dtype, shape, path) -> np.ndarray:
    n = int(np.prod(shape)) * dtype.itemsize
    if len(raw) < offset + n:
        raise VolumeFormatError(f"{path}: truncated payload")
    return np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)), offset=offset).reshape(shape)


def save_volume(volume: CtVolume, path) -> None:
    path = Path(path)
    header = _pack_header(VOLUME_MAGIC, 1, volume.shape, volume.spacing, 0, volume.patient_id)
    path.write_bytes(header + volume.voxels.astype("<i2").tobytes(order="C"))


def load_volume(path) -> CtVolume:
    raw, dtype, shape, spacing, _, pid = _read_header(path, VOLUME_MAGIC)
    if dtype != _DTYPES[1]:
        raise VolumeFormatError(f"{path}: malformed header (volume dtype must be int16)")
    if len(raw) != HEADER_SIZE + int(np.prod(shape)) * dtype.itemsize:
        raise VolumeFormatError(f"{path}: payload size does not match header shape {shape}")
    voxels = _payload(raw, HEADER_SIZE, dtype, shape, path)
    return CtVolume(voxels=voxels, spacing=spacing, patient_id=pid)


def save_mask(mask: LabelMask, path, patient_id: str = "") -> None:
    path = Path(path)
    flags = _FLAG_LUNG if mask.lung is not None else 0
    header = _pack_header(MASK_MAGIC, 2, mask.shape, (0.0, 0.0, 0.0), flags, patient_id)
    parts = [header, mask.labels.tobytes(order="C")]
    if mask.lung is not None:
        parts.append(mask.lung.astype(np.uint8).tobytes(order="C"))
    path.write_bytes(b"".join(parts))


def load_mask(path, expected_shape=None) -> LabelMask:
    raw, dtype, shape, _, flags, _ = _read_header(path, MASK_MAGIC)
    if dtype != _DTYPES[2]:
        raise VolumeFormatError(f"{path}: malformed header (mask dtype must be uint8)")
    if expected_shape is not None and tuple(expected_shape) != tuple(shape):
        raise VolumeFormatError(f"{path}: shape mismatch, file {shape} vs expected {tuple(expected_shape)}")
    n = int(np.prod(shape))
    expected_len = HEADER_SIZE + n * (2 if flags & _FLAG_LUNG else 1)
    if len(raw) != expected_len:
        raise VolumeFormatError(f"{path}: payload size does not match header shape {shape}")
    labels = _payload(raw, HEADER_SIZE, dtype, shape, path)
    lung = None
    if flags & _FLAG_LUNG:
        lung_raw = _payload(raw, HEADER_SIZE + n, dtype, shape, path)
        if lung_raw.max(initial=0) > 1:
            raise VolumeFormatError(f"{path}: lung mask must be 0/1")
        lung = lung_raw.astype(bool)
    return LabelMask(labels=labels, lung=lung)


def read_manifest(path) -> Dataset:
    """Parse a ``patient_id<TAB>volume_path<TAB>mask_path`` manifest.

    Relative paths are resolved against the manifest's directory.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such manifest: {path}")
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise VolumeFormatError(f"{path}:{lineno}: expected 3 tab-separated fields")
        pid, vol, msk = fields
        vol_path, msk_path = (path.parent / vol), (path.parent / msk)
        for p in (vol_path, msk_path):
            if not p.is_file():
                raise FileNotFoundError(f"{path}:{lineno}: referenced file missing: {p}")
        records.append((pid, vol_path, msk_path))
    return Dataset(records=records, manifest_path=path)


def write_manifest(dataset: Dataset, path) -> None:
    path = Path(path)
    lines = []
    for pid, vol, msk in dataset.records:
        vol, msk = Path(vol), Path(msk)
        try:
            vol = vol.relative_to(path.parent)
            msk = msk.relative_to(path.parent)
        except ValueError:
            pass
        lines.append(f"{pid}\t{vol.as_posix()}\t{msk.as_posix()}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
