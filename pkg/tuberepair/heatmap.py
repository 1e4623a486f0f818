"""Gaussian keypoint heatmaps, the visibility gated KMSE loss and argmax decoding."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from tuberepair.errors import NumericError, ShapeMismatchError
from tuberepair.volume import VoxelCoord

KEYPOINTS = 2
DEFAULT_SIGMA = 2.5


@dataclass(frozen=True, eq=False)
class HeatmapTensor:
    """K channel heatmaps over a (d, h, w) grid, stored as a read-only float32 array (K, d, h, w)."""
    data: np.ndarray

    def __post_init__(self):
        array = np.array(self.data, dtype=np.float32)
        if array.ndim != 4:
            raise ShapeMismatchError(f"heatmap must have 4 axes (K, d, h, w), got shape {array.shape}")
        if not np.all(np.isfinite(array)):
            raise NumericError("heatmap contains non-finite values")
        array.setflags(write=False)
        object.__setattr__(self, "data", array)

    @property
    def channels(self) -> int:
        return int(self.data.shape[0])

    @property
    def extent(self) -> Tuple[int, int, int]:
        return tuple(int(s) for s in self.data.shape[1:])

    @staticmethod
    def zeros(channels: int, extent: Sequence[int]) -> HeatmapTensor:
        return HeatmapTensor(np.zeros((channels, *extent), dtype=np.float32))


@dataclass(frozen=True)
class KeypointTarget:
    coords: Tuple[VoxelCoord, ...]  # Crop frame, may lie outside the extent
    visibility: Tuple[bool, ...]

    @staticmethod
    def within(coords: Sequence[Sequence[int]], extent: Sequence[int]) -> KeypointTarget:
        """Target whose visibility flags are the bounds checks of coords against extent."""
        local = tuple(VoxelCoord(*(int(c) for c in coord)) for coord in coords)
        visible = tuple(all(0 <= c < e for c, e in zip(coord, extent)) for coord in local)
        return KeypointTarget(local, visible)


def render_gaussian(target: KeypointTarget, extent: Sequence[int], sigma: float = DEFAULT_SIGMA) -> HeatmapTensor:
    """Peak normalized Gaussian per keypoint, evaluated on the full grid.

    Parameters
    ----------
    target: KeypointTarget
        Keypoints in the crop frame; invisible ones get an all-zero channel
    extent: Sequence[int]
        (d, h, w)
    sigma: float
        Standard deviation in voxels

    Example
    -------
    >>> hm = render_gaussian(KeypointTarget.within([(4, 4, 4), (4, 4, 7)], (8, 8, 8)), (8, 8, 8))
    >>> float(hm.data[0, 4, 4, 4]), round(float(hm.data[0, 4, 4, 7]), 5)
    (1.0, 0.48675)
    """
    if sigma <= 0:
        raise NumericError(f"sigma must be positive, got {sigma}")
    grids = np.meshgrid(*(np.arange(e, dtype=np.float64) for e in extent), indexing="ij")
    channels = []
    for coord, visible in zip(target.coords, target.visibility):
        if not visible:
            channels.append(np.zeros(tuple(extent), dtype=np.float64))
            continue
        squared = sum((grid - c) ** 2 for grid, c in zip(grids, coord))
        channels.append(np.exp(-squared / (2.0 * sigma * sigma)))
    return HeatmapTensor(np.stack(channels))


def _check_shapes(pred: HeatmapTensor, gt: HeatmapTensor, visibility: Sequence[bool]) -> None:
    if pred.data.shape != gt.data.shape:
        raise ShapeMismatchError(f"prediction shape {pred.data.shape} differs from target shape {gt.data.shape}")
    if len(visibility) != pred.channels:
        raise ShapeMismatchError(f"{len(visibility)} visibility flags for {pred.channels} channels")


def kmse_loss(pred: HeatmapTensor, gt: HeatmapTensor, visibility: Sequence[bool]) -> float:
    """Mean over channels of the summed squared error of every visible channel.

    Example
    -------
    >>> pred = HeatmapTensor(np.array([0.5, -0.5, 0.0, 0.0]).reshape(2, 1, 1, 2))
    >>> kmse_loss(pred, HeatmapTensor.zeros(2, (1, 1, 2)), [True, False])
    0.25
    """
    _check_shapes(pred, gt, visibility)
    diff = pred.data.astype(np.float64) - gt.data.astype(np.float64)
    per_channel = [math.fsum((d * d).ravel().tolist()) if v else 0.0 for d, v in zip(diff, visibility)]
    return math.fsum(per_channel) / pred.channels


def kmse_gradient(pred: HeatmapTensor, gt: HeatmapTensor, visibility: Sequence[bool]) -> np.ndarray:
    """d kmse / d pred: (2 / K) (pred - gt) on visible channels, zero elsewhere."""
    _check_shapes(pred, gt, visibility)
    gate = np.asarray(visibility, dtype=np.float64).reshape(-1, 1, 1, 1)
    return 2.0 / pred.channels * gate * (pred.data.astype(np.float64) - gt.data.astype(np.float64))


def argmax_coord(channel: np.ndarray) -> VoxelCoord:
    """Coordinate of the maximum; ties go to the smallest linear index."""
    flat = int(np.argmax(channel))
    return VoxelCoord(*(int(c) for c in np.unravel_index(flat, channel.shape)))


def decode_argmax(hm: HeatmapTensor) -> Tuple[VoxelCoord, ...]:
    return tuple(argmax_coord(channel) for channel in hm.data)
