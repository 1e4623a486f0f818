"""Centerline extraction and the branch graph of a tubular tree."""
from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Sequence, Set, Tuple

import networkx as nx
import numpy as np
from scipy.spatial import cKDTree
from skimage.morphology import skeletonize as _lee_skeletonize

from tuberepair.errors import EmptyVolumeError, GraphSchemaError
from tuberepair.util import dumps_json
from tuberepair.volume import Dims, Volume3D, VoxelCoord, euclidean_distance_transform

logger = logging.getLogger(__name__)

GRAPH_VERSION = 1
ENDPOINT = "endpoint"
BIFURCATION = "bifurcation"
NODE_KINDS = (ENDPOINT, BIFURCATION)
SHORT_LINK_VOXELS = 2

FORWARD_OFFSETS = np.array([o for o in itertools.product((-1, 0, 1), repeat=3) if o > (0, 0, 0)])


@dataclass(frozen=True, eq=False)
class SkeletonVoxels:
    source_dims: Dims
    mask: np.ndarray

    @property
    def voxels(self) -> FrozenSet[VoxelCoord]:
        return frozenset(VoxelCoord(*(int(c) for c in v)) for v in np.argwhere(self.mask))

    def count(self) -> int:
        return int(np.count_nonzero(self.mask))


@dataclass(frozen=True)
class GraphNode:
    id: int
    coord: VoxelCoord
    kind: str
    voxel_count: int = 1  # Skeleton voxels merged into this node


@dataclass(frozen=True)
class GraphEdge:
    id: int
    node_a: int
    node_b: int
    points: Tuple[VoxelCoord, ...]  # Interior centerline voxels ordered from node_a to node_b
    radii: Tuple[float, ...]
    mean_radius: float
    length: float
    branch_volume_S: int

    @property
    def interior_count(self) -> int:
        return len(self.points)

    def other(self, node_id: int) -> int:
        return self.node_b if node_id == self.node_a else self.node_a


@dataclass(frozen=True)
class BranchGraph:
    """Centerline graph: endpoint and bifurcation nodes joined by branch edges.

    Example
    -------
    >>> graph = BranchGraph((4, 4, 4), (GraphNode(0, VoxelCoord(0, 0, 0), ENDPOINT),), ())
    >>> graph.endpoints()[0].coord
    VoxelCoord(z=0, y=0, x=0)
    """
    dims: Dims
    nodes: Tuple[GraphNode, ...]
    edges: Tuple[GraphEdge, ...]
    contains_cycles: bool = False

    def node(self, node_id: int) -> GraphNode:
        return self._node_index()[node_id]

    def edge(self, edge_id: int) -> GraphEdge:
        for candidate in self.edges:
            if candidate.id == edge_id:
                return candidate
        raise KeyError(edge_id)

    def _node_index(self) -> Dict[int, GraphNode]:
        return {n.id: n for n in self.nodes}

    def endpoints(self) -> List[GraphNode]:
        return [n for n in self.nodes if n.kind == ENDPOINT]

    def bifurcations(self) -> List[GraphNode]:
        return [n for n in self.nodes if n.kind == BIFURCATION]

    def to_networkx(self) -> nx.MultiGraph:
        """MultiGraph keyed by edge id with the branch volume on every edge."""
        graph = nx.MultiGraph()
        graph.add_nodes_from(n.id for n in self.nodes)
        for e in self.edges:
            graph.add_edge(e.node_a, e.node_b, key=e.id, branch_volume_S=e.branch_volume_S)
        return graph


def _thin(mask: np.ndarray, passes: int = 1) -> np.ndarray:
    thinned = np.pad(mask, 1, mode="constant", constant_values=False)
    for _ in range(passes):
        thinned = _lee_skeletonize(thinned, method="lee") > 0
    return np.ascontiguousarray(thinned[1:-1, 1:-1, 1:-1] & mask)


def skeletonize(vol: Volume3D) -> SkeletonVoxels:
    """Topology preserving curve thinning of the foreground.

    Directional thinning with simple point tests runs twice on a one voxel zero padded copy so
    border voxels can be peeled like interior ones.

    Raises
    ------
    EmptyVolumeError
        The volume has no foreground voxel
    """
    if vol.count() == 0:
        raise EmptyVolumeError("cannot skeletonize an empty volume")
    mask = _thin(vol.mask, passes=2)
    logger.debug("skeleton of %d voxels from %d foreground voxels", int(mask.sum()), vol.count())
    return SkeletonVoxels(vol.dims, mask)


def voxel_graph(coords: np.ndarray, dims: Sequence[int]) -> nx.Graph:
    """26-adjacency graph over voxel coordinates; nodes are row indices of coords."""
    graph = nx.Graph()
    graph.add_nodes_from(range(len(coords)))
    if len(coords) == 0:
        return graph
    index = np.full(tuple(int(d) for d in dims), -1, dtype=np.int64)
    index[tuple(coords.T)] = np.arange(len(coords))
    upper = np.asarray(dims) - 1
    for offset in FORWARD_OFFSETS:
        shifted = coords + offset
        inside = np.all((shifted >= 0) & (shifted <= upper), axis=1)
        source = np.nonzero(inside)[0]
        target = index[tuple(shifted[inside].T)]
        hit = target >= 0
        graph.add_edges_from(zip(source[hit].tolist(), target[hit].tolist()))
    return graph


def _polyline_length(points: Sequence[Sequence[int]]) -> float:
    if len(points) < 2:
        return 0.0
    steps = np.diff(np.asarray(points, dtype=np.float64), axis=0)
    return math.fsum(np.sqrt(np.sum(steps * steps, axis=1)).tolist())


@dataclass
class _Cluster:
    kind: str
    members: List[int]
    coord: VoxelCoord = VoxelCoord(0, 0, 0)
    id: int = -1


@dataclass
class _Chain:
    node_a: int
    node_b: int
    members: List[int] = field(default_factory=list)


def _order_chain(graph: nx.Graph, members: Set[int], sources: List[int]) -> List[int]:
    """Members ordered by hop distance from the sources, ties by linear index."""
    distance = {s: 0 for s in sources}
    frontier = list(sources)
    while frontier:
        following = []
        for voxel in frontier:
            for neighbour in graph.neighbors(voxel):
                if neighbour in members and neighbour not in distance:
                    distance[neighbour] = distance[voxel] + 1
                    following.append(neighbour)
        frontier = following
    return sorted(members, key=lambda v: (distance.get(v, len(members)), v))


class _GraphBuilder:

    def __init__(self, skel: SkeletonVoxels, edt: np.ndarray):
        self.dims = skel.source_dims
        self.edt = edt
        self.coords = np.argwhere(skel.mask)  # Row order is linear index order
        self.graph = voxel_graph(self.coords, self.dims)
        self.owner: Dict[int, int] = {}  # voxel -> cluster position
        self.clusters: List[_Cluster] = []
        self.pinned: Set[int] = set()  # Cluster positions placed on closed loops

    def _add_cluster(self, kind: str, members: List[int]) -> int:
        position = len(self.clusters)
        self.clusters.append(_Cluster(kind, sorted(members)))
        for voxel in members:
            self.owner[voxel] = position
        return position

    def _attached(self, voxel: int) -> List[int]:
        return sorted({self.owner[n] for n in self.graph.neighbors(voxel) if n in self.owner})

    def _classify(self) -> None:
        junction = [v for v in self.graph.nodes if self.graph.degree(v) >= 3]
        for members in sorted(nx.connected_components(self.graph.subgraph(junction)), key=min):
            self._add_cluster(BIFURCATION, list(members))
        for voxel in self.graph.nodes:
            if self.graph.degree(voxel) > 1:
                continue
            attached = self._attached(voxel)
            if not attached:
                self._add_cluster(ENDPOINT, [voxel])
                continue
            # Endpoint touching another node: fold it in so no edge is left without points
            position = attached[0]
            self.clusters[position].members = sorted([*self.clusters[position].members, voxel])
            self.owner[voxel] = position

    def _chains(self) -> List[_Chain]:
        free = [v for v in self.graph.nodes if v not in self.owner]
        pending = sorted((set(c) for c in nx.connected_components(self.graph.subgraph(free))), key=min)
        chains: List[_Chain] = []
        for members in pending:
            if not any(self._attached(v) for v in members):
                # Closed loop without any node: pin a node on its first voxel
                pin = min(members)
                self.pinned.add(self._add_cluster(BIFURCATION, [pin]))
                members.discard(pin)
            # Degree two voxels form a path whose two ends each touch one node voxel
            start = min(v for v in members if self._attached(v))
            ordered = _order_chain(self.graph, members, [start])
            head, tail = self._attached(start), self._attached(ordered[-1])
            node_a = head[0]
            if len(ordered) == 1:
                node_b = head[-1]
            else:
                node_b = tail[-1]
            chains.append(_Chain(node_a, node_b, ordered))
        return chains

    def _link_limit(self, chain: _Chain) -> float:
        widest = max(float(self.edt[tuple(self.coords[v])]) for v in chain.members)
        return max(float(SHORT_LINK_VOXELS), widest)

    def _merge_short_links(self, chains: List[_Chain]) -> List[_Chain]:
        """Fuses bifurcation clusters joined by a chain no longer than the tube radius along it.

        Thinning splits a thick junction into nearby junction clusters; a link or a loop that stays
        inside the tube cross section is absorbed into one node.
        """
        parent = list(range(len(self.clusters)))

        def find(i: int) -> int:
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        kept: List[_Chain] = []
        absorbed: Dict[int, List[int]] = {}
        for chain in chains:
            a, b = find(chain.node_a), find(chain.node_b)
            both_junctions = self.clusters[a].kind == BIFURCATION and self.clusters[b].kind == BIFURCATION
            if both_junctions and a not in self.pinned and len(chain.members) <= self._link_limit(chain):
                parent[b] = a
                absorbed.setdefault(a, []).extend(chain.members)
            else:
                kept.append(chain)
        if len(kept) == len(chains):
            return chains
        merged: Dict[int, List[int]] = {}
        for position, cluster in enumerate(self.clusters):
            merged.setdefault(find(position), []).extend(cluster.members)
        for root, members in absorbed.items():
            merged[find(root)].extend(members)
        remap: Dict[int, int] = {}
        clusters: List[_Cluster] = []
        for root in sorted(merged, key=lambda r: min(merged[r])):
            remap[root] = len(clusters)
            clusters.append(_Cluster(self.clusters[root].kind, sorted(merged[root])))
        self.clusters = clusters
        self.owner = {v: remap[root] for root, members in merged.items() for v in members}
        return [_Chain(remap[find(c.node_a)], remap[find(c.node_b)], c.members) for c in kept]

    def build(self) -> BranchGraph:
        self._classify()
        chains = self._merge_short_links(self._chains())
        for cluster in self.clusters:
            if len(cluster.members) == 1:
                cluster.coord = VoxelCoord(*(int(c) for c in self.coords[cluster.members[0]]))
            else:
                cluster.coord = VoxelCoord.of(np.round(self.coords[cluster.members].mean(axis=0)))
        order = sorted(range(len(self.clusters)), key=lambda p: self.clusters[p].members[0])
        for node_id, position in enumerate(order):
            self.clusters[position].id = node_id
        nodes = tuple(GraphNode(c.id, c.coord, c.kind, len(c.members)) for c in sorted(self.clusters, key=lambda c: c.id))

        specs: List[Tuple[int, int, List[int]]] = []
        for chain in chains:
            a, b = self.clusters[chain.node_a].id, self.clusters[chain.node_b].id
            members = chain.members
            if a > b:
                a, b, members = b, a, members[::-1]
            specs.append((a, b, members))
        specs.sort(key=lambda s: (s[0], s[1], s[2][0]))

        voxel_edge = np.full(len(self.coords), -1, dtype=np.int64)
        drafts = []
        for edge_id, (a, b, members) in enumerate(specs):
            points = tuple(VoxelCoord(*(int(c) for c in self.coords[v])) for v in members)
            radii = tuple(float(self.edt[tuple(p)]) for p in points)
            polyline = [nodes[a].coord, *points, nodes[b].coord]
            drafts.append((edge_id, a, b, points, radii, math.fsum(radii) / len(radii), _polyline_length(polyline)))
            voxel_edge[members] = edge_id
        lowest_edge: Dict[int, int] = {}
        for edge_id, a, b, *_ in drafts:
            lowest_edge.setdefault(a, edge_id)
            lowest_edge.setdefault(b, edge_id)
        for cluster in self.clusters:
            if cluster.id in lowest_edge:
                voxel_edge[cluster.members] = lowest_edge[cluster.id]

        volumes = _branch_volumes(self.coords, voxel_edge, self.edt, len(drafts))
        edges = tuple(GraphEdge(edge_id, a, b, points, radii, mean_radius, length, volumes[edge_id])
                      for edge_id, a, b, points, radii, mean_radius, length in drafts)
        branch = nx.MultiGraph()
        branch.add_nodes_from(n.id for n in nodes)
        branch.add_edges_from((e.node_a, e.node_b) for e in edges)
        cyclic = len(edges) > len(nodes) - nx.number_connected_components(branch)
        return BranchGraph(tuple(int(d) for d in self.dims), nodes, edges, bool(cyclic))


def _branch_volumes(coords: np.ndarray, voxel_edge: np.ndarray, edt: np.ndarray, edge_count: int) -> List[int]:
    """Foreground voxel count owned by every edge through its nearest skeleton voxel."""
    volumes = [0] * edge_count
    foreground = np.argwhere(edt > 0)
    if edge_count == 0 or len(coords) == 0 or len(foreground) == 0:
        return volumes
    k = min(8, len(coords))
    distances, nearest = cKDTree(coords).query(foreground, k=k)
    if k == 1:
        distances, nearest = distances[:, None], nearest[:, None]
    tied = distances <= distances[:, :1] + 1e-9
    winner = np.where(tied, nearest, np.iinfo(np.int64).max).min(axis=1)
    owners = voxel_edge[winner]
    counts = np.bincount(owners[owners >= 0], minlength=edge_count)
    return [int(c) for c in counts]


def build_graph(skel: SkeletonVoxels, edt: np.ndarray) -> BranchGraph:
    """Builds the branch graph of a unit width skeleton.

    Endpoints are skeleton voxels with one neighbour; bifurcations are voxels with three or more, adjacent
    ones merged into a node at their rounded centroid. Edges are the maximal paths of two-neighbour voxels
    between nodes, so every edge has at least one point. An endpoint touching another node is folded into
    it, and bifurcations joined by a link no longer than the tube radius along it become one node.

    Parameters
    ----------
    skel: SkeletonVoxels
        Centerline voxels
    edt: np.ndarray
        Distance transform of the source volume; radii are read from it and its nonzero voxels are the
        foreground shared out between edges as branch volume

    Returns
    -------
    graph: BranchGraph
        Nodes ordered by their first voxel's linear index; edges ordered by (node_a, node_b, first point).
    """
    graph = _GraphBuilder(skel, edt).build()
    logger.debug("graph with %d nodes, %d edges, cycles=%s", len(graph.nodes), len(graph.edges),
                 graph.contains_cycles)
    return graph


def prune_spurs(skel: SkeletonVoxels, graph: BranchGraph) -> SkeletonVoxels:
    """Drops terminal branches that end inside the tube of the bifurcation they leave.

    A spur is an edge from an endpoint to a bifurcation whose polyline is at most one voxel longer than the
    tube radius next to the bifurcation. Those come from bumps on the tube surface, not from branches.
    One voxel stubs folded into a bifurcation go too, and the rest is thinned again so the voxels left
    around a removed spur do not form a new junction.
    """
    degree = graph.to_networkx().degree
    mask = skel.mask.copy()
    coords = np.argwhere(mask)
    voxels = voxel_graph(coords, skel.source_dims)
    for voxel in voxels.nodes:
        if voxels.degree(voxel) == 1 and voxels.degree(next(iter(voxels.neighbors(voxel)))) >= 3:
            mask[tuple(coords[voxel])] = False
    for e in graph.edges:
        for tip, base in ((e.node_a, e.node_b), (e.node_b, e.node_a)):
            tip_node, base_node = graph.node(tip), graph.node(base)
            if tip_node.kind != ENDPOINT or base_node.kind != BIFURCATION or degree[tip] != 1:
                continue
            radius = e.radii[-1 if tip == e.node_a else 0]
            if e.length <= radius + 1.0:
                for point in (*e.points, tip_node.coord):
                    mask[tuple(point)] = False
                break
    if mask.sum() == skel.count():
        return skel
    return SkeletonVoxels(skel.source_dims, _thin(mask))


def extract_graph(vol: Volume3D, prune: bool = True, max_rounds: int = 4) -> Tuple[SkeletonVoxels, BranchGraph]:
    """Skeleton and branch graph of a volume, spurs pruned until none remain or max_rounds is reached."""
    edt = euclidean_distance_transform(vol)
    skel = skeletonize(vol)
    graph = build_graph(skel, edt)
    for _ in range(max_rounds if prune else 0):
        pruned = prune_spurs(skel, graph)
        if pruned.count() == skel.count():
            break
        skel = pruned
        graph = build_graph(skel, edt)
    logger.info("extracted %d endpoints, %d bifurcations, %d edges", len(graph.endpoints()),
                len(graph.bifurcations()), len(graph.edges))
    return skel, graph


def graph_to_document(graph: BranchGraph) -> dict:
    return {
        "version": GRAPH_VERSION,
        "dims": list(graph.dims),
        "nodes": [{"id": n.id, "coord": list(n.coord), "kind": n.kind, "voxel_count": n.voxel_count}
                  for n in graph.nodes],
        "edges": [{"id": e.id, "node_a": e.node_a, "node_b": e.node_b,
                   "points": [list(p) for p in e.points], "radii": list(e.radii),
                   "mean_radius": e.mean_radius, "length": e.length, "branch_volume_S": e.branch_volume_S}
                  for e in graph.edges],
        "contains_cycles": graph.contains_cycles,
    }


def export_graph_json(graph: BranchGraph) -> bytes:
    """Graph JSON bytes; floats use the shortest repr that reads back to the same double."""
    return dumps_json(graph_to_document(graph)).encode("utf-8")


def _require(mapping: dict, key: str, path: str, kinds):
    if not isinstance(mapping, dict) or key not in mapping:
        raise GraphSchemaError(path)
    value = mapping[key]
    allowed = kinds if isinstance(kinds, tuple) else (kinds,)
    if not isinstance(value, allowed) or (isinstance(value, bool) and bool not in allowed):
        raise GraphSchemaError(path, f"unexpected value {value!r}")
    return value


def _coord(value, path: str) -> VoxelCoord:
    if (not isinstance(value, list) or len(value) != 3
            or not all(isinstance(c, int) and not isinstance(c, bool) and c >= 0 for c in value)):
        raise GraphSchemaError(path, f"expected three non-negative integers, got {value!r}")
    return VoxelCoord(*value)


def graph_from_document(document) -> BranchGraph:
    if not isinstance(document, dict):
        raise GraphSchemaError("document", "top level must be an object")
    version = _require(document, "version", "version", int)
    if version != GRAPH_VERSION:
        raise GraphSchemaError("version", f"unsupported version {version}")
    dims = _require(document, "dims", "dims", list)
    if len(dims) != 3 or not all(isinstance(d, int) and not isinstance(d, bool) and d > 0 for d in dims):
        raise GraphSchemaError("dims", f"expected three positive integers, got {dims!r}")
    raw_nodes = _require(document, "nodes", "nodes", list)
    raw_edges = _require(document, "edges", "edges", list)
    cyclic = _require(document, "contains_cycles", "contains_cycles", bool)

    nodes = []
    for i, raw in enumerate(raw_nodes):
        path = f"nodes[{i}]"
        kind = _require(raw, "kind", f"{path}.kind", str)
        if kind not in NODE_KINDS:
            raise GraphSchemaError(f"{path}.kind", f"unknown kind {kind!r}")
        voxel_count = raw.get("voxel_count", 1) if isinstance(raw, dict) else 1
        if not isinstance(voxel_count, int) or isinstance(voxel_count, bool) or voxel_count < 1:
            raise GraphSchemaError(f"{path}.voxel_count")
        nodes.append(GraphNode(_require(raw, "id", f"{path}.id", int),
                               _coord(_require(raw, "coord", f"{path}.coord", list), f"{path}.coord"),
                               kind, voxel_count))
    node_ids = {n.id for n in nodes}
    if len(node_ids) != len(nodes):
        raise GraphSchemaError("nodes", "duplicate node id")

    edges = []
    for i, raw in enumerate(raw_edges):
        path = f"edges[{i}]"
        node_a = _require(raw, "node_a", f"{path}.node_a", int)
        node_b = _require(raw, "node_b", f"{path}.node_b", int)
        for key, node_id in (("node_a", node_a), ("node_b", node_b)):
            if node_id not in node_ids:
                raise GraphSchemaError(f"{path}.{key}", f"unknown node {node_id}")
        points = tuple(_coord(p, f"{path}.points") for p in _require(raw, "points", f"{path}.points", list))
        radii = _require(raw, "radii", f"{path}.radii", list)
        if len(radii) != len(points) or not all(isinstance(r, (int, float)) and not isinstance(r, bool)
                                                for r in radii):
            raise GraphSchemaError(f"{path}.radii", "expected one number per point")
        volume = _require(raw, "branch_volume_S", f"{path}.branch_volume_S", int)
        if volume < 0:
            raise GraphSchemaError(f"{path}.branch_volume_S", "negative volume")
        edges.append(GraphEdge(_require(raw, "id", f"{path}.id", int), node_a, node_b, points,
                               tuple(float(r) for r in radii),
                               float(_require(raw, "mean_radius", f"{path}.mean_radius", (int, float))),
                               float(_require(raw, "length", f"{path}.length", (int, float))),
                               volume))
    return BranchGraph(tuple(dims), tuple(nodes), tuple(edges), cyclic)


def import_graph_json(raw: bytes) -> BranchGraph:
    """Parses graph JSON bytes.

    Raises
    ------
    GraphSchemaError
        ``key`` names the missing or invalid key, e.g. ``edges`` or ``edges[2].radii``
    """
    try:
        document = json.loads(raw)
    except ValueError as exc:
        raise GraphSchemaError("document", f"invalid JSON: {exc}") from exc
    return graph_from_document(document)


def read_graph(path) -> BranchGraph:
    with open(path, "rb") as handle:
        return import_graph_json(handle.read())
