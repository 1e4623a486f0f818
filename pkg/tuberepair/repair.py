"""Bridging detected disconnections with capsules."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import reduce
from typing import List, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from tuberepair.errors import UsageError
from tuberepair.inference import KeypointPair
from tuberepair.skeleton import BranchGraph
from tuberepair.util import PathLike, write_json
from tuberepair.volume import Volume3D, VoxelCoord, connected_components, euclidean_distance_transform, paint_capsule
from tuberepair.writer import Writer

logger = logging.getLogger(__name__)

MIN_RADIUS = 0.5


@dataclass(frozen=True)
class RepairEntry:
    label: int
    kp1: VoxelCoord
    kp2: VoxelCoord
    R: float
    pre_components: int
    post_components: int
    added_voxels: int

    def document(self) -> dict:
        return {"label": self.label, "kp1": list(self.kp1), "kp2": list(self.kp2), "R": self.R,
                "pre_components": self.pre_components, "post_components": self.post_components,
                "added_voxels": self.added_voxels}


def link_keypoints(vol: Volume3D, kp1: Sequence[int], kp2: Sequence[int], R: float) -> Volume3D:
    """Union of the volume with every voxel within R of the segment [kp1, kp2].

    Example
    -------
    >>> empty = Volume3D(np.zeros((9, 9, 9), dtype=bool))
    >>> link_keypoints(empty, (4, 4, 4), (4, 4, 4), 1.0).count()
    7
    """
    if not R >= MIN_RADIUS:
        raise UsageError(f"bridge radius must be at least {MIN_RADIUS}, got {R}")
    mask = np.array(vol.mask)
    paint_capsule(mask, kp1, kp2, R)
    return vol.with_data(mask)


def fallback_radius(edt: np.ndarray, kp1: Sequence[int]) -> float:
    """Tube radius at kp1 read from the distance transform."""
    return max(float(edt[tuple(int(c) for c in kp1)]), MIN_RADIUS)


def graph_radii(graph: BranchGraph, pairs: Sequence[KeypointPair]) -> List[Optional[float]]:
    """Mean radius of the branch whose centerline passes nearest to each kp1; None without any branch point."""
    owners = [e for e in graph.edges for _ in e.points]
    if not owners or not pairs:
        return [None] * len(pairs)
    tree = cKDTree(np.asarray([p for e in graph.edges for p in e.points], dtype=np.float64))
    _, nearest = tree.query(np.asarray([p.kp1 for p in pairs], dtype=np.float64))
    return [owners[int(i)].mean_radius for i in np.atleast_1d(nearest)]


def _bridge(pair: KeypointPair, R: float):
    def step(vol: Volume3D) -> Writer[Volume3D, List[RepairEntry]]:
        before = connected_components(vol).count
        repaired = link_keypoints(vol, pair.kp1, pair.kp2, R)
        after = connected_components(repaired).count
        entry = RepairEntry(pair.label, pair.kp1, pair.kp2, float(R), before, after, repaired.count() - vol.count())
        logger.info("bridged component %d with R=%.3g: %d -> %d components", pair.label, R, before, after)
        return Writer(repaired, [entry])
    return step


def repair_volume(vol: Volume3D, pairs: Sequence[KeypointPair],
                  radii: Optional[Sequence[Optional[float]]] = None) -> Writer[Volume3D, List[RepairEntry]]:
    """Bridges every pair in order.

    Parameters
    ----------
    vol: Volume3D
        Disconnected volume
    pairs: Sequence[KeypointPair]
        Snapped keypoint pairs
    radii: Optional[Sequence[Optional[float]]]
        Branch radius per pair; missing ones fall back to the distance transform of vol at kp1

    Returns
    -------
    writer: Writer[Volume3D, List[RepairEntry]]
        Repaired volume and one log entry per pair
    """
    if radii is not None and len(radii) != len(pairs):
        raise UsageError(f"{len(radii)} radii for {len(pairs)} pairs")
    edt = euclidean_distance_transform(vol) if pairs else None
    chosen = []
    for index, pair in enumerate(pairs):
        given = radii[index] if radii is not None else None
        chosen.append(float(given) if given is not None else fallback_radius(edt, pair.kp1))
    return reduce(lambda writer, step: writer.bind(step), (_bridge(p, R) for p, R in zip(pairs, chosen)),
                  Writer(vol, []))


def write_repair_log(path: PathLike, entries: Sequence[RepairEntry], extra: Optional[dict] = None) -> None:
    write_json(path, dict({"version": 1, "pairs": [e.document() for e in entries]}, **(extra or {})))
