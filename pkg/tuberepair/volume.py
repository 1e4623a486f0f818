"""Dense 3D volumes, connected components, ball morphology, distance transform, crops and the .btv file format."""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass
from typing import Dict, Iterable, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from tuberepair.errors import (MalformedHeaderError, NoComponentsError, OutOfBoundsError, PayloadSizeError,
                               UnsupportedVersionError, UsageError, ValidationError, VolumeFormatError)
from tuberepair.util import PathLike, atomic_write_bytes

logger = logging.getLogger(__name__)

Dims = Tuple[int, int, int]
Spacing = Tuple[float, float, float]

BTV_MAGIC = b"BTV1"
BTV_VERSION = 1
BTV_HEADER = struct.Struct("<4sI3I3dB")
DTYPE_BOOL = 0
DTYPE_F32 = 1

CONNECTIVITY_RANK = {6: 1, 18: 2, 26: 3}


class VoxelCoord(NamedTuple):
    z: int
    y: int
    x: int

    @staticmethod
    def of(values: Iterable[float]) -> VoxelCoord:
        """Rounds any three numbers to a VoxelCoord."""
        z, y, x = (int(round(float(v))) for v in values)
        return VoxelCoord(z, y, x)


@dataclass(frozen=True, eq=False)
class Volume3D:
    """Immutable dense volume of shape (D, H, W), boolean occupancy or float32 values.

    The array is stored C-ordered, so the linear index is x-fastest. The stored array is a read-only copy.

    Parameters
    ----------
    data: np.ndarray
        Three dimensional array. Boolean and float32 data are kept, other floats become float32 and
        integer data becomes boolean occupancy.
    spacing: Spacing
        Voxel edge lengths (sz, sy, sx), all positive

    Example
    -------
    >>> Volume3D(np.ones((2, 2, 2), dtype=bool)).dims
    (2, 2, 2)
    """
    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or 0 in data.shape:
            raise ValidationError(f"volume needs three positive dims, got shape {data.shape}")
        if data.dtype == np.bool_:
            target = np.bool_
        elif np.issubdtype(data.dtype, np.floating):
            target = np.float32
        else:
            target = np.bool_
            data = data != 0
        data = np.array(data, dtype=target, order="C", copy=True)
        data.setflags(write=False)
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(math.isfinite(s) and s > 0 for s in spacing):
            raise ValidationError(f"spacing must be three positive numbers, got {self.spacing}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> Dims:
        return tuple(int(d) for d in self.data.shape)

    @property
    def is_binary(self) -> bool:
        return self.data.dtype == np.bool_

    @property
    def mask(self) -> np.ndarray:
        """Boolean foreground mask; nonzero values for float volumes."""
        return self.data if self.is_binary else self.data != 0

    def count(self) -> int:
        return int(np.count_nonzero(self.data))

    def contains(self, coord: Sequence[int]) -> bool:
        return all(0 <= int(c) < d for c, d in zip(coord, self.dims))

    def at(self, coord: Sequence[int]):
        return self.data[tuple(int(c) for c in coord)]

    def with_data(self, data: np.ndarray) -> Volume3D:
        return Volume3D(data, self.spacing)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Volume3D):
            return False
        return (self.spacing == other.spacing and self.data.dtype == other.data.dtype
                and np.array_equal(self.data, other.data))

    def __repr__(self) -> str:
        return f"Volume3D(dims={self.dims}, spacing={self.spacing}, dtype={self.data.dtype}, count={self.count()})"


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Component labelling: 0 is background, labels 1..M ordered by descending size."""
    labels: np.ndarray
    component_sizes: Dict[int, int]

    @property
    def dims(self) -> Dims:
        return tuple(int(d) for d in self.labels.shape)

    @property
    def count(self) -> int:
        return len(self.component_sizes)

    def mask(self, label: int) -> np.ndarray:
        return self.labels == label

    def label_at(self, coord: Sequence[int]) -> int:
        return int(self.labels[tuple(int(c) for c in coord)])

    def coords(self, label: int) -> np.ndarray:
        """(n, 3) array of the voxels of a component in linear index order."""
        return np.argwhere(self.labels == label)


@dataclass(frozen=True, eq=False)
class Crop3D:
    origin: Tuple[int, int, int]  # Signed parent coordinate of local (0, 0, 0)
    extent: Tuple[int, int, int]
    data: np.ndarray

    def to_parent(self, local: Sequence[int]) -> VoxelCoord:
        return VoxelCoord(*(int(o) + int(c) for o, c in zip(self.origin, local)))

    def to_local(self, parent: Sequence[int]) -> Tuple[int, int, int]:
        return tuple(int(c) - int(o) for o, c in zip(self.origin, parent))

    def contains_local(self, local: Sequence[int]) -> bool:
        return all(0 <= int(c) < e for c, e in zip(local, self.extent))


def _relabel(raw: np.ndarray, count: int, sizes: Optional[np.ndarray] = None) -> LabelVolume:
    flat = raw.ravel()
    if sizes is None:
        sizes = np.bincount(flat, minlength=count + 1)
    values, first = np.unique(flat, return_index=True)
    first_index = dict(zip(values.tolist(), first.tolist()))
    present = [label for label in range(1, count + 1) if sizes[label] > 0]
    order = sorted(present, key=lambda label: (-int(sizes[label]), first_index[label]))
    lookup = np.zeros(count + 1, dtype=np.int32)
    for new_label, old_label in enumerate(order, start=1):
        lookup[old_label] = new_label
    component_sizes = {new_label: int(sizes[old_label]) for new_label, old_label in enumerate(order, start=1)}
    return LabelVolume(lookup[raw], component_sizes)


def connected_components(vol: Volume3D, connectivity: int = 26) -> LabelVolume:
    """Labels the foreground components of a volume.

    Parameters
    ----------
    vol: Volume3D
        Volume to label, nonzero voxels are foreground
    connectivity: int
        6, 18 or 26 voxel adjacency

    Returns
    -------
    labels: LabelVolume
        Label 1 is the largest component, ties go to the smaller minimum linear index.

    Example
    -------
    >>> mask = np.zeros((2, 2, 2), dtype=bool); mask[0, 0, 0] = mask[1, 1, 1] = True
    >>> connected_components(Volume3D(mask), 6).count
    2
    """
    if connectivity not in CONNECTIVITY_RANK:
        raise UsageError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    structure = ndimage.generate_binary_structure(3, CONNECTIVITY_RANK[connectivity])
    raw, count = ndimage.label(vol.mask, structure=structure)
    return _relabel(raw.astype(np.int32, copy=False), int(count))


def _compact(lab: LabelVolume, keep: Iterable[int]) -> LabelVolume:
    lookup = np.zeros(lab.count + 1, dtype=np.int32)
    sizes: Dict[int, int] = {}
    for new_label, old_label in enumerate(sorted(keep), start=1):
        lookup[old_label] = new_label
        sizes[new_label] = lab.component_sizes[old_label]
    return LabelVolume(lookup[lab.labels], sizes)


def filter_small_components(lab: LabelVolume, min_voxels: int = 5) -> LabelVolume:
    """Sends components smaller than min_voxels to background and recompacts the remaining labels."""
    keep = [label for label, size in lab.component_sizes.items() if size >= min_voxels]
    if len(keep) < lab.count:
        logger.debug("filtered %d components below %d voxels", lab.count - len(keep), min_voxels)
    return _compact(lab, keep)


def remove_largest_component(lab: LabelVolume) -> LabelVolume:
    if lab.count == 0:
        raise NoComponentsError("no components")
    return _compact(lab, range(2, lab.count + 1))


def crop_array(array: np.ndarray, origin: Sequence[int], extent: Sequence[int]) -> np.ndarray:
    """Copies the window [origin, origin + extent) of the last three axes, zero filled outside the array."""
    spatial = array.shape[-3:]
    out = np.zeros(tuple(array.shape[:-3]) + tuple(int(e) for e in extent), dtype=array.dtype)
    src, dst = [], []
    for o, e, d in zip(origin, extent, spatial):
        lo, hi = max(int(o), 0), min(int(o) + int(e), int(d))
        if hi <= lo:
            return out
        src.append(slice(lo, hi))
        dst.append(slice(lo - int(o), hi - int(o)))
    out[(Ellipsis, *dst)] = array[(Ellipsis, *src)]
    return out


def add_clipped(accumulator: np.ndarray, block: np.ndarray, origin: Sequence[int]) -> None:
    """Adds block into accumulator at origin in place, dropping the parts outside the accumulator."""
    spatial = accumulator.shape[-3:]
    src, dst = [], []
    for o, e, d in zip(origin, block.shape[-3:], spatial):
        lo, hi = max(int(o), 0), min(int(o) + int(e), int(d))
        if hi <= lo:
            return
        dst.append(slice(lo, hi))
        src.append(slice(lo - int(o), hi - int(o)))
    accumulator[(Ellipsis, *dst)] += block[(Ellipsis, *src)]


def crop_origin(center: Sequence[int], extent: Sequence[int]) -> Tuple[int, int, int]:
    return tuple(int(c) - int(e) // 2 for c, e in zip(center, extent))


def crop_centered(vol: Volume3D, center: Sequence[int], extent: Sequence[int]) -> Crop3D:
    """Window of the given extent whose origin is center - extent // 2.

    Example
    -------
    >>> crop_centered(Volume3D(np.zeros((100, 100, 100), dtype=bool)), (50, 50, 50), (80, 80, 80)).origin
    (10, 10, 10)
    """
    if not vol.contains(center):
        raise OutOfBoundsError(f"crop center {tuple(center)} outside volume {vol.dims}")
    extent = tuple(int(e) for e in extent)
    if any(e <= 0 for e in extent):
        raise UsageError(f"crop extent must be positive, got {extent}")
    origin = crop_origin(center, extent)
    return Crop3D(origin, extent, crop_array(vol.data, origin, extent))


def ball_structure(radius: float) -> np.ndarray:
    """Boolean ball with offset (dz, dy, dx) included iff dz² + dy² + dx² ≤ radius²."""
    reach = int(math.floor(radius))
    axis = np.arange(-reach, reach + 1)
    dz, dy, dx = np.meshgrid(axis, axis, axis, indexing="ij")
    return dz * dz + dy * dy + dx * dx <= radius * radius


def _check_radius(radius: float) -> None:
    if radius < 0 or not math.isfinite(radius):
        raise UsageError(f"radius must be finite and non-negative, got {radius}")


def dilate_ball(vol: Volume3D, radius: float) -> Volume3D:
    _check_radius(radius)
    if radius < 1:
        return Volume3D(vol.mask, vol.spacing)
    return vol.with_data(ndimage.binary_dilation(vol.mask, structure=ball_structure(radius)))


def erode_ball(vol: Volume3D, radius: float) -> Volume3D:
    """Ball erosion; voxels outside the volume count as background."""
    _check_radius(radius)
    if radius < 1:
        return Volume3D(vol.mask, vol.spacing)
    return vol.with_data(ndimage.binary_erosion(vol.mask, structure=ball_structure(radius), border_value=0))


def euclidean_distance_transform(vol: Volume3D) -> np.ndarray:
    """Exact spacing-aware distance of every foreground voxel to the nearest background voxel.

    Voxels outside the volume count as background, so a volume without background still gets finite values.

    Returns
    -------
    distances: np.ndarray
        float64 array of the volume's dims, 0 on background
    """
    padded = np.pad(vol.mask, 1, mode="constant", constant_values=False)
    distances = ndimage.distance_transform_edt(padded, sampling=vol.spacing)
    return np.ascontiguousarray(distances[1:-1, 1:-1, 1:-1])


def point_segment_distance(points: np.ndarray, start: Sequence[float], end: Sequence[float]) -> np.ndarray:
    """Euclidean distance of (..., 3) points to the segment [start, end]."""
    a = np.asarray(start, dtype=np.float64)
    b = np.asarray(end, dtype=np.float64)
    ab = b - a
    denominator = float(ab @ ab)
    relative = points - a
    if denominator == 0.0:
        return np.sqrt(np.sum(relative * relative, axis=-1))
    t = np.clip((relative @ ab) / denominator, 0.0, 1.0)
    offset = relative - t[..., None] * ab
    return np.sqrt(np.sum(offset * offset, axis=-1))


def capsule_region(dims: Sequence[int], start: Sequence[float], end: Sequence[float],
                   radius: float) -> Tuple[Tuple[slice, ...], np.ndarray]:
    """Bounding-box slices and the mask of voxels within radius of the segment [start, end], clipped to dims."""
    a = np.asarray(start, dtype=np.float64)
    b = np.asarray(end, dtype=np.float64)
    lo = np.maximum(np.floor(np.minimum(a, b) - radius).astype(int), 0)
    hi = np.minimum(np.ceil(np.maximum(a, b) + radius).astype(int) + 1, np.asarray(dims, dtype=int))
    slices = tuple(slice(int(l), int(h)) for l, h in zip(lo, hi))
    if np.any(hi <= lo):
        return slices, np.zeros(tuple(max(int(h - l), 0) for l, h in zip(lo, hi)), dtype=bool)
    grid = np.stack(np.meshgrid(*(np.arange(l, h) for l, h in zip(lo, hi)), indexing="ij"), axis=-1)
    return slices, point_segment_distance(grid.astype(np.float64), a, b) <= radius + 1e-9


def paint_capsule(mask: np.ndarray, start: Sequence[float], end: Sequence[float], radius: float) -> int:
    """Sets every voxel within radius of the segment in place and returns how many voxels changed."""
    slices, region = capsule_region(mask.shape, start, end, radius)
    if region.size == 0:
        return 0
    window = mask[slices]
    added = int(np.count_nonzero(region & ~window))
    window |= region
    return added


def encode_volume(vol: Volume3D) -> bytes:
    dtype_code = DTYPE_BOOL if vol.is_binary else DTYPE_F32
    header = BTV_HEADER.pack(BTV_MAGIC, BTV_VERSION, *vol.dims, *vol.spacing, dtype_code)
    if dtype_code == DTYPE_BOOL:
        payload = vol.data.astype(np.uint8).tobytes(order="C")
    else:
        payload = vol.data.astype("<f4").tobytes(order="C")
    return header + payload


def decode_volume(raw: bytes) -> Volume3D:
    """Parses .btv bytes.

    Raises
    ------
    MalformedHeaderError
        Short header, wrong magic, zero dims, non-positive spacing or unknown dtype code
    UnsupportedVersionError
        Version other than 1
    PayloadSizeError
        Payload length differs from D·H·W elements
    VolumeFormatError
        Boolean payload byte other than 0 or 1
    """
    if len(raw) < BTV_HEADER.size:
        raise MalformedHeaderError(f"malformed header: {len(raw)} bytes, need {BTV_HEADER.size}")
    magic, version, d, h, w, sz, sy, sx, dtype_code = BTV_HEADER.unpack_from(raw)
    if magic != BTV_MAGIC:
        raise MalformedHeaderError(f"malformed header: bad magic {magic!r}")
    if version != BTV_VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    if 0 in (d, h, w):
        raise MalformedHeaderError(f"malformed header: zero dimension in {(d, h, w)}")
    if not all(math.isfinite(s) and s > 0 for s in (sz, sy, sx)):
        raise MalformedHeaderError(f"malformed header: spacing {(sz, sy, sx)}")
    if dtype_code not in (DTYPE_BOOL, DTYPE_F32):
        raise MalformedHeaderError(f"malformed header: unknown dtype code {dtype_code}")
    payload = raw[BTV_HEADER.size:]
    element = 1 if dtype_code == DTYPE_BOOL else 4
    expected = d * h * w * element
    if len(payload) != expected:
        raise PayloadSizeError(f"payload size mismatch: expected {expected} bytes, found {len(payload)}")
    if dtype_code == DTYPE_BOOL:
        values = np.frombuffer(payload, dtype=np.uint8)
        if values.size and int(values.max()) > 1:
            raise VolumeFormatError("boolean payload byte outside {0, 1}")
        data = values.astype(bool)
    else:
        data = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    return Volume3D(data.reshape(d, h, w), (sz, sy, sx))


def read_volume(path: PathLike) -> Volume3D:
    with open(path, "rb") as handle:
        vol = decode_volume(handle.read())
    logger.debug("read volume %s %s", path, vol.dims)
    return vol


def write_volume(vol: Volume3D, path: PathLike) -> None:
    atomic_write_bytes(path, encode_volume(vol))
    logger.debug("wrote volume %s %s", path, vol.dims)
