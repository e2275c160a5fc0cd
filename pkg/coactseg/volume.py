"""
Physical-space volumes, intensity normalization, difference maps and the
COACTVOL on-disk format.
"""

import enum
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from coactseg.utils import ShapeError, VolumeFormatError, is_binary

MAGIC = b"COACTVOL"
VERSION = 1
DTYPE_F64 = 0
DTYPE_U8 = 1
HEADER = struct.Struct("<8sIB3Q3d")
MAX_VOXELS = 1 << 32


@dataclass
class Volume3D:
    """Dense scalar grid of shape (D, H, W) with voxel spacing in mm."""

    data: np.ndarray
    spacing_mm: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        _check_grid(self.data, self.spacing_mm)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)

    def like(self, data: np.ndarray) -> "Volume3D":
        """New volume with this volume's spacing."""
        return Volume3D(data, self.spacing_mm)


@dataclass
class LabelVolume:
    """Binary {0, 1} mask on the same grid as its paired Volume3D."""

    data: np.ndarray
    spacing_mm: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if not is_binary(self.data):
            raise ValueError("LabelVolume data must be binary")
        self.data = np.ascontiguousarray(self.data, dtype=np.uint8)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        _check_grid(self.data, self.spacing_mm)

    @classmethod
    def from_array(cls, mask, spacing_mm=(1.0, 1.0, 1.0)) -> "LabelVolume":
        return cls(np.asarray(mask) > 0, spacing_mm)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)

    def count(self) -> int:
        return int(self.data.sum())


def _check_grid(data: np.ndarray, spacing) -> None:
    if data.ndim != 3 or min(data.shape) < 1:
        raise ShapeError(f"volumes must be 3-d with positive extents, got shape {data.shape}")
    if len(spacing) != 3 or min(spacing) <= 0:
        raise ShapeError(f"spacing must be three positive values, got {spacing}")


def check_same_grid(*volumes) -> None:
    """Raise ShapeError unless all volumes share dims and spacing."""
    first = volumes[0]
    for other in volumes[1:]:
        if other.dims != first.dims:
            raise ShapeError(f"dims {other.dims} do not match {first.dims}")
        if not np.allclose(other.spacing_mm, first.spacing_mm):
            raise ShapeError(f"spacing {other.spacing_mm} does not match {first.spacing_mm}")


class SampleKind(str, enum.Enum):
    SINGLE = "single"
    TWO = "two"


@dataclass
class Sample:
    """The training quadruple (x_b, x_fu, x_d, y) plus its kind and brain mask."""

    kind: SampleKind
    baseline: Volume3D
    follow_up: Volume3D
    difference: Volume3D
    label: LabelVolume
    brain_mask: LabelVolume
    sample_id: str = ""
    metadata: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.kind = SampleKind(self.kind)
        check_same_grid(self.baseline, self.follow_up, self.difference, self.label, self.brain_mask)
        if self.kind is SampleKind.SINGLE:
            if not np.array_equal(self.baseline.data, self.follow_up.data):
                raise ValueError("single-time-point samples need identical baseline and follow-up")
            if np.any(self.difference.data != 0):
                raise ValueError("single-time-point samples need an all-zero difference map")

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.baseline.dims


def normalize_zmuv(volume: Volume3D, mask: LabelVolume) -> Volume3D:
    """
    Zero-mean unit-variance normalization over the brain mask.

    Args:
        volume: Intensity volume
        mask: Brain mask on the same grid

    Returns:
        Normalized volume, zero outside the mask
    """
    check_same_grid(volume, mask)
    inside = mask.data > 0
    values = volume.data[inside]
    if values.size < 2:
        raise ValueError(f"normalization needs at least 2 mask voxels, got {values.size}")
    mean = values.mean()
    std = values.std()
    if not std > 0:
        raise ValueError("normalization region has constant intensity (zero variance)")
    data = np.where(inside, (volume.data - mean) / std, 0.0)
    return volume.like(data)


def difference_map(baseline: Volume3D, follow_up: Volume3D) -> Volume3D:
    """Voxelwise follow-up minus baseline."""
    check_same_grid(baseline, follow_up)
    return baseline.like(follow_up.data - baseline.data)


def make_sample_single(x: Volume3D, y_all: LabelVolume, mask: LabelVolume,
                       sample_id: str = "") -> Sample:
    """Single-time-point quadruple: x_b = x_fu = x, x_d = 0."""
    check_same_grid(x, y_all, mask)
    normalized = normalize_zmuv(x, mask)
    return Sample(
        kind=SampleKind.SINGLE,
        baseline=normalized,
        follow_up=normalized.like(normalized.data.copy()),
        difference=normalized.like(np.zeros(normalized.dims)),
        label=y_all,
        brain_mask=mask,
        sample_id=sample_id,
    )


def make_sample_two(x_b: Volume3D, x_fu: Volume3D, y_new: LabelVolume, mask: LabelVolume,
                    sample_id: str = "") -> Sample:
    """Two-time-point quadruple; each scan is normalized before differencing."""
    check_same_grid(x_b, x_fu, y_new, mask)
    baseline = normalize_zmuv(x_b, mask)
    follow_up = normalize_zmuv(x_fu, mask)
    return Sample(
        kind=SampleKind.TWO,
        baseline=baseline,
        follow_up=follow_up,
        difference=difference_map(baseline, follow_up),
        label=y_new,
        brain_mask=mask,
        sample_id=sample_id,
    )


# COACTVOL format -----------------------------------------------------------

def save_volume(volume, path: str) -> None:
    """
    Write a Volume3D (f64) or LabelVolume (u8) as a COACTVOL file.

    Layout (little-endian): magic, u32 version, u8 dtype code, 3 x u64 dims,
    3 x f64 spacing, raw row-major data.
    """
    if isinstance(volume, LabelVolume):
        code, payload = DTYPE_U8, volume.data.astype("<u1")
    else:
        code, payload = DTYPE_F64, volume.data.astype("<f8")
    header = HEADER.pack(MAGIC, VERSION, code, *volume.dims, *volume.spacing_mm)
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as handle:
        handle.write(header)
        handle.write(payload.tobytes(order="C"))


def load_volume(path: str):
    """Read a COACTVOL file back into a Volume3D or LabelVolume."""
    with open(path, "rb") as handle:
        raw = handle.read()
    if len(raw) < len(MAGIC) or raw[:len(MAGIC)] != MAGIC:
        raise VolumeFormatError(f"{path}: bad magic, not a COACTVOL file")
    if len(raw) < HEADER.size:
        raise VolumeFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    _, version, code, d, h, w, sd, sh, sw = HEADER.unpack_from(raw)
    if version != VERSION:
        raise VolumeFormatError(f"{path}: unsupported version {version}")
    if code not in (DTYPE_F64, DTYPE_U8):
        raise VolumeFormatError(f"{path}: unknown dtype code {code}")
    if min(d, h, w) < 1 or d * h * w > MAX_VOXELS:
        raise VolumeFormatError(f"{path}: dims {(d, h, w)} overflow or are empty")
    dtype = np.dtype("<f8") if code == DTYPE_F64 else np.dtype("<u1")
    expected = d * h * w * dtype.itemsize
    body = raw[HEADER.size:]
    if len(body) != expected:
        raise VolumeFormatError(
            f"{path}: truncated data, expected {expected} bytes, found {len(body)}")
    data = np.frombuffer(body, dtype=dtype).reshape(d, h, w)
    if code == DTYPE_U8:
        return LabelVolume(data.copy(), (sd, sh, sw))
    return Volume3D(data.astype(np.float64), (sd, sh, sw))


SAMPLE_PARTS = ("baseline", "follow_up", "difference", "label", "brain_mask")


def save_sample(sample: Sample, directory: str, stem: str) -> Dict[str, str]:
    """
    Write the five volumes of a Sample.

    Returns:
        Mapping from part name to the written file name (relative to ``directory``)
    """
    paths = {}
    for part in SAMPLE_PARTS:
        name = f"{stem}_{part}.cvol"
        save_volume(getattr(sample, part), os.path.join(directory, name))
        paths[part] = name
    return paths


def load_sample(kind, paths: Dict[str, str], directory: str = "", sample_id: str = "") -> Sample:
    """Inverse of save_sample."""
    parts = {part: load_volume(os.path.join(directory, paths[part])) for part in SAMPLE_PARTS}
    return Sample(kind=SampleKind(kind), sample_id=sample_id, **parts)
