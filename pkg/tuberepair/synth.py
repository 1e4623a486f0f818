"""Disconnection sample synthesis: phantom tube trees, branch and keypoint sampling, gap carving and validation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import networkx as nx
import numpy as np

from tuberepair.errors import (CarveError, InfeasibleSeparationError, NoEligibleBranchError, PhantomError,
                               UsageError, ValidationError)
from tuberepair.result import Err, Ok, Result
from tuberepair.skeleton import BIFURCATION, ENDPOINT, BranchGraph, GraphEdge, GraphNode
from tuberepair.volume import (Volume3D, VoxelCoord, capsule_region, connected_components, point_segment_distance)

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
FIXED_CROPS = 3


@dataclass(frozen=True)
class PhantomParams:
    """Procedural tube tree parameters. Lengths and radii in voxels, angles in degrees."""
    dims: Tuple[int, int, int] = (96, 96, 96)
    depth: int = 3
    root_radius: float = 4.0
    radius_decay: float = 0.7
    branch_length_range: Tuple[float, float] = (18.0, 26.0)
    branching_angle_range: Tuple[float, float] = (25.0, 45.0)
    seed: int = 0

    def __post_init__(self):
        if self.depth < 1:
            raise UsageError(f"depth must be at least 1, got {self.depth}")
        if self.root_radius < 1.5:
            raise UsageError(f"root_radius must be at least 1.5, got {self.root_radius}")
        if not 0 < self.radius_decay < 1:
            raise UsageError(f"radius_decay must lie in (0, 1), got {self.radius_decay}")
        if self.root_radius * self.radius_decay ** (self.depth - 1) < 1.0:
            raise UsageError("leaf radius would drop below one voxel")
        low, high = self.branch_length_range
        if not 0 < low <= high:
            raise UsageError(f"invalid branch_length_range {self.branch_length_range}")
        low, high = self.branching_angle_range
        if not 0 <= low <= high < 90:
            raise UsageError(f"invalid branching_angle_range {self.branching_angle_range}")
        if len(self.dims) != 3 or min(self.dims) < 8:
            raise UsageError(f"dims must be three sizes of at least 8, got {self.dims}")


@dataclass(frozen=True)
class BranchCriteria:
    min_interior: int = 8
    min_mean_radius: float = 1.0
    exclude_trunk: bool = True


@dataclass(frozen=True)
class SynthConfig:
    branches_per_volume: int = 30
    split_ratio: Tuple[int, int, int] = (7, 1, 2)
    seed: int = 0
    min_sep: int = 4
    max_sep: int = 12
    margin: float = 1.5
    max_retries: int = 10
    criteria: BranchCriteria = field(default_factory=BranchCriteria)


@dataclass(frozen=True, eq=False)
class DisconnectionSample:
    sample_id: str
    source_volume_id: str
    edge_id: int
    kp1: VoxelCoord
    kp2: VoxelCoord
    kp1_index: int
    kp2_index: int
    gap_radius: float
    disconnected: Volume3D
    branch_mean_radius: float
    branch_volume_S: int
    kp1_component_label: int
    kp2_component_label: int
    split: str
    fixed_crop_centers: Tuple[VoxelCoord, ...] = ()
    removed_voxels: int = 0

    def scalars(self) -> dict:
        """Every field except the volume, JSON ready."""
        return {
            "sample_id": self.sample_id,
            "source_volume_id": self.source_volume_id,
            "edge_id": self.edge_id,
            "kp1": list(self.kp1),
            "kp2": list(self.kp2),
            "kp1_index": self.kp1_index,
            "kp2_index": self.kp2_index,
            "gap_radius": self.gap_radius,
            "branch_mean_radius": self.branch_mean_radius,
            "branch_volume_S": self.branch_volume_S,
            "kp1_component_label": self.kp1_component_label,
            "kp2_component_label": self.kp2_component_label,
            "split": self.split,
            "fixed_crop_centers": [list(c) for c in self.fixed_crop_centers],
            "removed_voxels": self.removed_voxels,
        }


class Carve(NamedTuple):
    volume: Volume3D
    gap_radius: float
    removed: int


# Geometry


def _unit(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    return v if n == 0 else v / n


def _random_unit_vector(rng: np.random.Generator) -> np.ndarray:
    u = rng.uniform(-1.0, 1.0)
    theta = rng.uniform(0.0, 2.0 * math.pi)
    s = math.sqrt(1.0 - u * u)
    return np.array([u, s * math.sin(theta), s * math.cos(theta)])


def rotate_vector(v: np.ndarray, axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation of v around axis by angle radians."""
    axis = _unit(axis)
    parallel = np.dot(v, axis) * axis
    perpendicular = v - parallel
    return parallel + perpendicular * math.cos(angle) + np.cross(axis, perpendicular) * math.sin(angle)


def _perpendicular_axis(direction: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    axis = np.cross(_random_unit_vector(rng), direction)
    if np.linalg.norm(axis) < 1e-6:
        axis = np.cross(direction, np.array([0.0, 0.0, 1.0]))
        if np.linalg.norm(axis) < 1e-6:
            axis = np.cross(direction, np.array([0.0, 1.0, 0.0]))
    return _unit(axis)


def rasterize_segment(start: Sequence[int], end: Sequence[int]) -> List[VoxelCoord]:
    """26-connected voxel line from start to end, both included."""
    a = np.asarray(start, dtype=np.float64)
    b = np.asarray(end, dtype=np.float64)
    steps = int(np.max(np.abs(b - a)))
    if steps == 0:
        return [VoxelCoord.of(a)]
    return [VoxelCoord.of(np.floor(a + (b - a) * i / steps + 0.5)) for i in range(steps + 1)]


def _segment_distance(a0, a1, b0, b1) -> float:
    samples = max(int(math.ceil(np.linalg.norm(np.subtract(a1, a0)) * 2)), 1)
    t = np.linspace(0.0, 1.0, samples + 1)[:, None]
    points = np.asarray(a0, dtype=np.float64) + t * (np.asarray(a1, dtype=np.float64) - np.asarray(a0, dtype=np.float64))
    return float(point_segment_distance(points, b0, b1).min())


# Phantom trees


@dataclass
class _Segment:
    start: np.ndarray
    end: np.ndarray
    radius: float
    parent: int
    level: int


def _fits(end: np.ndarray, radius: float, dims: Sequence[int]) -> bool:
    return bool(np.all(end - radius >= 1.0) and np.all(end + radius <= np.asarray(dims) - 2.0))


def _clear_of(segments: List[_Segment], candidate: _Segment) -> bool:
    for index, other in enumerate(segments):
        if index == candidate.parent:
            continue
        gap = _segment_distance(candidate.start, candidate.end, other.start, other.end)
        if gap < candidate.radius + other.radius + 1.0:
            return False
    return True


def _grow_pair(segments: List[_Segment], parent_index: int, params: PhantomParams,
               rng: np.random.Generator) -> Result[Tuple[_Segment, _Segment], List[str]]:
    """Two children leaving the parent tip on opposite sides of one plane through the parent axis."""
    parent = segments[parent_index]
    direction = _unit(parent.end - parent.start)
    radius = parent.radius * params.radius_decay
    low, high = params.branching_angle_range
    for draw in range(16):
        axis = _perpendicular_axis(direction, rng)
        pair = []
        for sign in (1.0, -1.0):
            angle = math.radians(rng.uniform(low, high)) * sign
            length = rng.uniform(*params.branch_length_range)
            end = np.floor(parent.end + rotate_vector(direction, axis, angle) * length + 0.5)
            pair.append(_Segment(parent.end, end, radius, parent_index, parent.level + 1))
        if all(_fits(child.end, radius, params.dims) and _clear_of(segments, child) for child in pair):
            return Ok((pair[0], pair[1]))
        logger.debug("rejected direction draw %d for the children of segment %d", draw, parent_index)
    return Err([f"no admissible directions for the children of segment {parent_index}"])


def _voxelize(segments: List[_Segment], dims: Sequence[int]) -> np.ndarray:
    mask = np.zeros(tuple(dims), dtype=bool)
    for segment in segments:
        slices, region = capsule_region(dims, segment.start, segment.end, segment.radius)
        mask[slices] |= region
    return mask


def _ownership(mask: np.ndarray, segments: List[_Segment]) -> List[int]:
    """Foreground voxels per segment by nearest segment axis, ties to the lower index."""
    foreground = np.argwhere(mask).astype(np.float64)
    distances = np.stack([point_segment_distance(foreground, s.start, s.end) for s in segments], axis=1)
    owners = np.argmin(distances, axis=1)
    return [int(c) for c in np.bincount(owners, minlength=len(segments))]


def _constructive_graph(segments: List[_Segment], mask: np.ndarray, dims) -> BranchGraph:
    children: Dict[int, List[int]] = {}
    for index, segment in enumerate(segments):
        children.setdefault(segment.parent, []).append(index)
    nodes = [GraphNode(0, VoxelCoord.of(segments[0].start), ENDPOINT)]
    tip_node: Dict[int, int] = {}
    for index, segment in enumerate(segments):
        kind = BIFURCATION if children.get(index) else ENDPOINT
        tip_node[index] = len(nodes)
        nodes.append(GraphNode(len(nodes), VoxelCoord.of(segment.end), kind))
    volumes = _ownership(mask, segments)
    edges = []
    for index, segment in enumerate(segments):
        node_a = 0 if segment.parent < 0 else tip_node[segment.parent]
        node_b = tip_node[index]
        line = rasterize_segment(nodes[node_a].coord, nodes[node_b].coord)
        points = tuple(line[1:-1])
        radii = tuple(float(segment.radius) for _ in points)
        steps = np.diff(np.asarray(line, dtype=np.float64), axis=0)
        length = math.fsum(np.sqrt(np.sum(steps * steps, axis=1)).tolist())
        edges.append(GraphEdge(index, node_a, node_b, points, radii, float(segment.radius), length, volumes[index]))
    return BranchGraph(tuple(int(d) for d in dims), tuple(nodes), tuple(edges), False)


def generate_phantom_tree(params: PhantomParams) -> Tuple[Volume3D, BranchGraph]:
    """Binary tube tree of voxelized capsules and its constructive branch graph.

    The root grows along +z from near the top face; every tip of the first depth - 1 levels spawns two
    children whose radius is the parent radius times radius_decay. Each child gets up to 16 seeded direction
    draws that must keep it inside the volume and clear of the other branches.

    Raises
    ------
    PhantomError
        "phantom out of bounds" when the root or a child cannot be placed

    Example
    -------
    >>> vol, graph = generate_phantom_tree(PhantomParams(dims=(48, 48, 48), depth=1, root_radius=3.0, seed=1))
    >>> len(graph.edges)
    1
    """
    rng = np.random.default_rng(params.seed)
    dims = np.asarray(params.dims, dtype=np.float64)
    top = math.ceil(params.root_radius) + 2.0
    start = np.floor(np.array([top, dims[1] / 2.0, dims[2] / 2.0]))
    length = rng.uniform(*params.branch_length_range)
    root_end = np.floor(start + np.array([length, 0.0, 0.0]) + 0.5)
    if not (_fits(start, params.root_radius, params.dims) and _fits(root_end, params.root_radius, params.dims)):
        raise PhantomError("phantom out of bounds")
    segments = [_Segment(start, root_end, float(params.root_radius), -1, 1)]
    frontier = [0]
    for _ in range(params.depth - 1):
        following = []
        for parent_index in frontier:
            pair = _grow_pair(segments, parent_index, params, rng)
            if pair.is_err():
                logger.debug("phantom seed %d: %s", params.seed, pair.unwrap_err_or([""])[0])
                raise PhantomError("phantom out of bounds")
            for child in pair.unwrap():
                segments.append(child)
                following.append(len(segments) - 1)
        frontier = following
    mask = _voxelize(segments, params.dims)
    graph = _constructive_graph(segments, mask, params.dims)
    logger.debug("phantom seed %d: %d branches, %d voxels", params.seed, len(segments), int(mask.sum()))
    return Volume3D(mask), graph


# Sampling


def eligible_edges(graph: BranchGraph, criteria: BranchCriteria = BranchCriteria(),
                   exclude: Sequence[int] = ()) -> List[GraphEdge]:
    """Edges passing the criteria, sorted by id. The trunk is the single largest-radius edge, ties to the lowest id."""
    if not graph.edges:
        return []
    trunk = min(graph.edges, key=lambda e: (-e.mean_radius, e.id)).id if criteria.exclude_trunk else None
    return sorted((e for e in graph.edges
                   if e.interior_count >= criteria.min_interior and e.mean_radius >= criteria.min_mean_radius
                   and e.id != trunk and e.id not in exclude), key=lambda e: e.id)


def select_branch(graph: BranchGraph, rng: np.random.Generator, criteria: BranchCriteria = BranchCriteria(),
                  exclude: Sequence[int] = ()) -> int:
    """Uniform choice among the eligible edges.

    Raises
    ------
    NoEligibleBranchError
        "no eligible branch"
    """
    candidates = eligible_edges(graph, criteria, exclude)
    if not candidates:
        raise NoEligibleBranchError("no eligible branch")
    return candidates[int(rng.integers(len(candidates)))].id


def subtree_volumes(graph: BranchGraph, edge_id: int) -> Tuple[int, int]:
    """Branch volume attached to node_a and to node_b once the edge is cut."""
    edge = graph.edge(edge_id)
    tree = graph.to_networkx()
    tree.remove_edge(edge.node_a, edge.node_b, key=edge_id)

    def side(node: int) -> int:
        reach = nx.node_connected_component(tree, node)
        return sum(d["branch_volume_S"] for u, v, d in tree.edges(reach, data=True))

    return side(edge.node_a), side(edge.node_b)


def sample_keypoints(graph: BranchGraph, edge_id: int, rng: np.random.Generator, min_sep: int = 4,
                     max_sep: int = 12) -> Tuple[int, int]:
    """Two centerline point indices of an edge, kp1 first.

    Both indices keep two points of distance to either end of the edge and lie between min_sep and max_sep
    apart; the pair is drawn uniformly. kp1 is the index nearer the node with the larger attached subtree
    volume.

    Raises
    ------
    InfeasibleSeparationError
        The edge is too short for any pair
    """
    edge = graph.edge(edge_id)
    last = edge.interior_count - 3
    pairs = [(i, j) for i in range(2, last + 1) for j in range(i + min_sep, min(i + max_sep, last) + 1)]
    if min_sep < 1 or not pairs:
        raise InfeasibleSeparationError(
            f"edge {edge_id} with {edge.interior_count} points has no pair {min_sep}..{max_sep} apart")
    near_a, near_b = pairs[int(rng.integers(len(pairs)))]
    volume_a, volume_b = subtree_volumes(graph, edge_id)
    return (near_a, near_b) if volume_a >= volume_b else (near_b, near_a)


def _tangent(points: Sequence[VoxelCoord], index: int) -> np.ndarray:
    before = points[max(index - 1, 0)]
    after = points[min(index + 1, len(points) - 1)]
    return _unit(np.subtract(after, before).astype(np.float64))


def carve_gap(vol: Volume3D, edge: GraphEdge, kp1_index: int, kp2_index: int, margin: float = 1.5,
              min_sep: int = 4) -> Carve:
    """Removes the tube between two keypoints of an edge.

    Every foreground voxel within local radius + margin of the centerline between the keypoints is deleted
    when it lies strictly between the two keypoint cross-section planes (more than half a voxel past each).

    Raises
    ------
    InfeasibleSeparationError
        Indices closer than min_sep or off the edge
    CarveError
        "carve produced invalid topology" when a keypoint is lost, the keypoints stay connected or the
        carve leaves more than one new component
    """
    points = edge.points
    lo, hi = sorted((kp1_index, kp2_index))
    if lo < 0 or hi >= len(points) or hi - lo < min_sep:
        raise InfeasibleSeparationError(f"keypoint indices {kp1_index}, {kp2_index} invalid for min_sep {min_sep}")
    start, end = np.asarray(points[lo], dtype=np.float64), np.asarray(points[hi], dtype=np.float64)
    start_normal, end_normal = _tangent(points, lo), _tangent(points, hi)
    mask = np.array(vol.mask)
    removal = np.zeros_like(mask)
    for k in range(lo, hi):
        reach = max(edge.radii[k], edge.radii[k + 1]) + margin
        slices, region = capsule_region(vol.dims, points[k], points[k + 1], reach)
        if region.size == 0:
            continue
        grid = np.stack(np.meshgrid(*(np.arange(s.start, s.stop) for s in slices), indexing="ij"), axis=-1)
        between = (((grid - start) @ start_normal) > 0.5) & (((grid - end) @ end_normal) < -0.5)
        removal[slices] |= region & between
    removal &= mask
    mask &= ~removal
    gap_radius = float(max(edge.radii[lo:hi + 1])) + margin
    carved = vol.with_data(mask)

    kp1, kp2 = points[kp1_index], points[kp2_index]
    before = connected_components(vol).count
    labels = connected_components(carved)
    first, second = labels.label_at(kp1), labels.label_at(kp2)
    if first == 0 or second == 0 or first == second or labels.count != before + 1:
        raise CarveError("carve produced invalid topology")
    return Carve(carved, gap_radius, int(removal.sum()))


def validate_sample(sample: DisconnectionSample, source: Optional[Volume3D] = None, edge: Optional[GraphEdge] = None,
                    check_crops: bool = True) -> Result[DisconnectionSample, List[str]]:
    """Checks a sample against its invariants; check_crops=False skips the fixed crop centers.

    Returns
    -------
    result: Result[DisconnectionSample, List[str]]
        Ok(sample), or Err with one message per violation, e.g. "kp2 in largest" or "extra labels [3]"
    """
    violations: List[str] = []
    vol = sample.disconnected
    labels = connected_components(vol)
    for name, kp in (("kp1", sample.kp1), ("kp2", sample.kp2)):
        if not vol.contains(kp) or not vol.at(kp):
            violations.append(f"{name} not foreground")
    if violations:
        return Err(violations)
    first, second = labels.label_at(sample.kp1), labels.label_at(sample.kp2)
    if first != 1:
        violations.append("kp1 not in largest")
    if second == 1:
        violations.append("kp2 in largest")
    if (first, second) != (sample.kp1_component_label, sample.kp2_component_label):
        violations.append(f"component labels {(sample.kp1_component_label, sample.kp2_component_label)} "
                          f"differ from {(first, second)}")
    allowed = 2 if source is None else connected_components(source).count + 1
    if labels.count > allowed:
        extra = [label for label in range(1, labels.count + 1) if label not in (first, second)]
        violations.append(f"extra labels {extra}")
    if first != second and labels.component_sizes.get(second, 0) * 2 >= labels.component_sizes.get(first, 0):
        violations.append("kp2 component not smaller than half of kp1 component")
    if sample.split not in SPLITS:
        violations.append(f"unknown split {sample.split!r}")
    expected_crops = 0 if sample.split == "train" else FIXED_CROPS
    if check_crops and len(sample.fixed_crop_centers) != expected_crops:
        violations.append(f"{len(sample.fixed_crop_centers)} fixed crop centers, expected {expected_crops}")
    for center in sample.fixed_crop_centers:
        if not vol.contains(center) or labels.label_at(center) != second:
            violations.append(f"fixed crop center {tuple(center)} outside kp2 component")
    if edge is not None:
        for name, kp in (("kp1", sample.kp1), ("kp2", sample.kp2)):
            if kp not in edge.points:
                violations.append(f"{name} off centerline")
    if source is not None:
        removed = source.mask & ~vol.mask
        if np.any(vol.mask & ~source.mask):
            violations.append("foreground not conserved")
        if not np.any(removed):
            violations.append("nothing carved")
        elif edge is not None:
            lo, hi = sorted((sample.kp1_index, sample.kp2_index))
            coords = np.argwhere(removed).astype(np.float64)
            nearest = np.full(len(coords), np.inf)
            for k in range(lo, max(hi, lo + 1)):
                b = edge.points[min(k + 1, hi)]
                nearest = np.minimum(nearest, point_segment_distance(coords, edge.points[k], b))
            if np.any(nearest > sample.gap_radius + 1e-9):
                violations.append("carved voxel outside gap")
    return Err(violations) if violations else Ok(sample)


def fixed_crop_centers(labels_mask: np.ndarray, rng: np.random.Generator, count: int = FIXED_CROPS) -> Tuple[VoxelCoord, ...]:
    """Uniform voxels of a component mask, drawn with replacement."""
    voxels = np.argwhere(labels_mask)
    picks = rng.integers(len(voxels), size=count)
    return tuple(VoxelCoord(*(int(c) for c in voxels[p])) for p in picks)


def _domain_error(error: Exception) -> Result[DisconnectionSample, List[str]]:
    if isinstance(error, ValidationError):
        return Err([str(error)])
    raise error


def synthesize_sample(sample_id: str, source_id: str, vol: Volume3D, graph: BranchGraph, edge_id: int,
                      rng: np.random.Generator, split: str, config: SynthConfig,
                      crop_rng: Optional[np.random.Generator] = None) -> Result[DisconnectionSample, List[str]]:
    """One carve attempt on a chosen edge; Err carries the reasons it was rejected.

    Fixed crop centers are drawn only once the carve is valid, so rejected attempts leave crop_rng untouched.
    """
    edge = graph.edge(edge_id)

    def attempt() -> DisconnectionSample:
        kp1_index, kp2_index = sample_keypoints(graph, edge_id, rng, config.min_sep, config.max_sep)
        carve = carve_gap(vol, edge, kp1_index, kp2_index, config.margin, config.min_sep)
        labels = connected_components(carve.volume)
        kp1, kp2 = edge.points[kp1_index], edge.points[kp2_index]
        return DisconnectionSample(sample_id, source_id, edge_id, kp1, kp2, kp1_index, kp2_index, carve.gap_radius,
                                   carve.volume, edge.mean_radius, edge.branch_volume_S, labels.label_at(kp1),
                                   labels.label_at(kp2), split, (), carve.removed)

    def with_crop_centers(sample: DisconnectionSample) -> DisconnectionSample:
        if split == "train":
            return sample
        component = connected_components(sample.disconnected).mask(sample.kp2_component_label)
        return replace(sample, fixed_crop_centers=fixed_crop_centers(component, crop_rng or rng))

    return (Result.safe(attempt)
            .bind_err(_domain_error)
            .bind(lambda sample: validate_sample(sample, vol, edge, check_crops=False))
            .map(with_crop_centers))


def synthesize_volume(source_id: str, vol: Volume3D, graph: BranchGraph, split: str, config: SynthConfig,
                      volume_index: int) -> Tuple[List[DisconnectionSample], int]:
    """Up to branches_per_volume samples on distinct edges of one volume.

    Each slot gets at most max_retries attempts. The volume's random stream is seed XOR volume_index, and
    every sample draws its fixed crop centers from its own stream.

    Returns
    -------
    samples, shortfall: Tuple[List[DisconnectionSample], int]
    """
    rng = np.random.default_rng(config.seed ^ volume_index)
    samples: List[DisconnectionSample] = []
    used: List[int] = []
    for slot in range(config.branches_per_volume):
        sample_id = f"{source_id}_b{slot:03d}"
        crop_rng = np.random.default_rng([config.seed, volume_index, slot])
        outcome: Result[DisconnectionSample, List[str]] = Err(["not attempted"])
        for retry in range(config.max_retries):
            try:
                edge_id = select_branch(graph, rng, config.criteria, used)
            except NoEligibleBranchError:
                shortfall = config.branches_per_volume - len(samples)
                logger.warning("volume %s: only %d eligible branches, shortfall %d", source_id, len(samples), shortfall)
                return samples, shortfall
            outcome = synthesize_sample(sample_id, source_id, vol, graph, edge_id, rng, split, config, crop_rng)
            if outcome.is_ok():
                break
            logger.debug("volume %s slot %d retry %d rejected: %s", source_id, slot, retry, outcome.unwrap_err_or([]))
        if outcome.is_ok():
            sample = outcome.unwrap()
            used.append(sample.edge_id)
            samples.append(sample)
        else:
            logger.warning("volume %s slot %d gave up after %d retries", source_id, slot, config.max_retries)
    return samples, config.branches_per_volume - len(samples)


def assign_splits(volume_ids: Sequence[str], ratio: Sequence[int] = (7, 1, 2), seed: int = 0) -> Dict[str, str]:
    """Splits volumes (never samples) by a seeded permutation at the given ratio, largest remainder rounding.

    Example
    -------
    >>> sorted(assign_splits([f"v{i}" for i in range(10)]).values()).count("train")
    7
    """
    if len(ratio) != 3 or any(r < 0 for r in ratio) or sum(ratio) == 0:
        raise UsageError(f"split ratio must be three non-negative integers, got {tuple(ratio)}")
    total = len(volume_ids)
    quotas = [total * r / sum(ratio) for r in ratio]
    counts = [int(math.floor(q)) for q in quotas]
    remainder = sorted(range(3), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in remainder[:total - sum(counts)]:
        counts[i] += 1
    order = np.random.default_rng(seed).permutation(total)
    ordered = sorted(volume_ids)
    splits: Dict[str, str] = {}
    position = 0
    for name, count in zip(SPLITS, counts):
        for index in order[position:position + count]:
            splits[ordered[int(index)]] = name
        position += count
    return splits
