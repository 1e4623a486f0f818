import json
import math
import unittest

import networkx as nx
import numpy as np
from scipy.spatial import cKDTree

from tuberepair.errors import EmptyVolumeError, GraphSchemaError
from tuberepair.skeleton import (BIFURCATION, ENDPOINT, BranchGraph, GraphEdge, GraphNode, SkeletonVoxels, build_graph,
                                 export_graph_json, extract_graph, import_graph_json, prune_spurs, skeletonize)
from tuberepair.synth import PhantomParams, generate_phantom_tree
from tuberepair.volume import Volume3D, VoxelCoord, connected_components, paint_capsule


def hand_skeleton(dims, voxels):
    mask = np.zeros(dims, dtype=bool)
    for v in voxels:
        mask[v] = True
    return SkeletonVoxels(dims, mask)


def skeleton_edt(skel, radius=1.0):
    return np.where(skel.mask, radius, 0.0)


def has_full_block(mask):
    blocks = (mask[:-1, :-1, :-1] & mask[1:, :-1, :-1] & mask[:-1, 1:, :-1] & mask[:-1, :-1, 1:]
              & mask[1:, 1:, :-1] & mask[1:, :-1, 1:] & mask[:-1, 1:, 1:] & mask[1:, 1:, 1:])
    return bool(blocks.any())


Y_TRUNK = [(z, 5, 5) for z in range(6)]
Y_LEFT = [(6, 4, 5), (7, 3, 5), (8, 2, 5)]
Y_RIGHT = [(6, 6, 5), (7, 7, 5), (8, 8, 5)]


def tube_volume(dims, segments):
    mask = np.zeros(dims, dtype=bool)
    for start, end, radius in segments:
        paint_capsule(mask, start, end, radius)
    return Volume3D(mask)


class TestSkeletonize(unittest.TestCase):
    """Curve thinning"""

    def test_empty_volume(self):
        with self.assertRaises(EmptyVolumeError):
            skeletonize(Volume3D(np.zeros((4, 4, 4), dtype=bool)))

    def test_single_voxel(self):
        mask = np.zeros((5, 5, 5), dtype=bool)
        mask[2, 2, 2] = True
        skel = skeletonize(Volume3D(mask))
        self.assertEqual(skel.voxels, frozenset({VoxelCoord(2, 2, 2)}))

    def test_straight_tube(self):
        vol = tube_volume((40, 16, 16), [((5, 8, 8), (34, 8, 8), 3.0)])
        skel = skeletonize(vol)
        self.assertGreater(skel.count(), 0)
        self.assertFalse(np.any(skel.mask & ~vol.mask))
        self.assertFalse(has_full_block(skel.mask))
        self.assertEqual(connected_components(Volume3D(skel.mask)).count, 1)
        coords = np.argwhere(skel.mask)
        off_axis = np.sqrt((coords[:, 1] - 8.0) ** 2 + (coords[:, 2] - 8.0) ** 2)
        self.assertLessEqual(float(off_axis.max()), 1.5)

    def test_preserves_component_count(self):
        vol = tube_volume((30, 30, 16), [((4, 6, 8), (25, 6, 8), 2.0), ((4, 22, 8), (25, 22, 8), 2.0)])
        skel = skeletonize(vol)
        self.assertEqual(connected_components(Volume3D(skel.mask)).count, 2)


class TestBuildGraph(unittest.TestCase):
    """Branch graph of hand made skeletons"""

    def test_single_voxel_is_one_endpoint(self):
        skel = hand_skeleton((5, 5, 5), [(2, 2, 2)])
        graph = build_graph(skel, skeleton_edt(skel))
        self.assertEqual([n.kind for n in graph.nodes], [ENDPOINT])
        self.assertEqual(graph.edges, ())

    def test_straight_path(self):
        skel = hand_skeleton((12, 12, 12), [(z, 5, 5) for z in range(10)])
        graph = build_graph(skel, skeleton_edt(skel, 2.0))
        self.assertEqual(len(graph.endpoints()), 2)
        self.assertEqual(len(graph.edges), 1)
        edge = graph.edges[0]
        self.assertEqual(edge.interior_count, 8)
        self.assertEqual(edge.points[0], VoxelCoord(1, 5, 5))
        self.assertEqual(edge.points[-1], VoxelCoord(8, 5, 5))
        self.assertAlmostEqual(edge.length, 9.0)
        self.assertEqual(edge.mean_radius, 2.0)
        self.assertFalse(graph.contains_cycles)

    def test_hand_built_y(self):
        skel = hand_skeleton((10, 10, 10), Y_TRUNK + Y_LEFT + Y_RIGHT)
        graph = build_graph(skel, skeleton_edt(skel))
        self.assertEqual(len(graph.endpoints()), 3)
        self.assertEqual([n.coord for n in graph.bifurcations()], [VoxelCoord(5, 5, 5)])
        self.assertEqual([n.id for n in graph.nodes], [0, 1, 2, 3])
        self.assertEqual([(e.node_a, e.node_b) for e in graph.edges], [(0, 1), (1, 2), (1, 3)])
        trunk, left, right = graph.edges
        self.assertEqual(trunk.points, tuple(VoxelCoord(z, 5, 5) for z in range(1, 5)))
        self.assertAlmostEqual(trunk.length, 5.0)
        self.assertAlmostEqual(left.length, 3 * math.sqrt(2))
        self.assertEqual(left.points, (VoxelCoord(6, 4, 5), VoxelCoord(7, 3, 5)))
        # Node voxels go to the lowest incident edge
        self.assertEqual([e.branch_volume_S for e in graph.edges], [6, 3, 3])
        self.assertFalse(graph.contains_cycles)

    def test_ring_is_cyclic(self):
        ring = [(2, 2, x) for x in range(2, 7)] + [(2, y, 7) for y in range(3, 7)] + \
               [(2, 7, x) for x in range(6, 1, -1)] + [(2, y, 2) for y in range(6, 2, -1)]
        skel = hand_skeleton((5, 10, 10), ring)
        graph = build_graph(skel, skeleton_edt(skel))
        self.assertTrue(graph.contains_cycles)

    def test_prune_short_spur(self):
        spur = [(6, 6, 5), (7, 7, 5)]
        longer = Y_LEFT + [(9, 1, 5)]
        skel = hand_skeleton((12, 12, 12), Y_TRUNK + longer + spur)
        graph = build_graph(skel, skeleton_edt(skel, 3.0))
        self.assertEqual(len(graph.edges), 3)
        pruned = prune_spurs(skel, graph)
        self.assertEqual(pruned.count(), skel.count() - 2)
        self.assertFalse(pruned.mask[6, 6, 5] or pruned.mask[7, 7, 5])
        rebuilt = build_graph(pruned, skeleton_edt(pruned, 3.0))
        self.assertEqual(len(rebuilt.endpoints()), 2)
        self.assertEqual(len(rebuilt.edges), 1)

    def test_endpoint_touching_junction_is_folded(self):
        arms = [(5, 5 - t, 5 - t) for t in range(1, 5)] + [(5, 5 + t, 5 + t) for t in range(1, 5)] + \
               [(5 + t, 5 - t, 5 + t) for t in range(1, 5)]
        skel = hand_skeleton((12, 12, 12), [(5, 5, 5), (4, 6, 4)] + arms)
        graph = build_graph(skel, skeleton_edt(skel))
        self.assertEqual(len(graph.endpoints()), 3)
        self.assertEqual([n.voxel_count for n in graph.bifurcations()], [2])
        self.assertEqual(len(graph.edges), 3)
        self.assertTrue(all(e.interior_count == 3 for e in graph.edges))
        self.assertEqual(sum(n.voxel_count for n in graph.nodes) + sum(e.interior_count for e in graph.edges),
                         skel.count())
        pruned = prune_spurs(skel, graph)
        self.assertFalse(pruned.mask[4, 6, 4])
        self.assertEqual(pruned.count(), skel.count() - 1)
        rebuilt = build_graph(pruned, skeleton_edt(pruned))
        self.assertEqual([(n.coord, n.voxel_count) for n in rebuilt.bifurcations()], [(VoxelCoord(5, 5, 5), 1)])

    def test_adjacent_endpoints_fold_into_one_node(self):
        skel = hand_skeleton((5, 5, 5), [(2, 2, 2), (2, 2, 3)])
        graph = build_graph(skel, skeleton_edt(skel))
        self.assertEqual([(n.kind, n.voxel_count) for n in graph.nodes], [(ENDPOINT, 2)])
        self.assertEqual(graph.edges, ())

    def test_junctions_within_tube_radius_merge(self):
        link = [(5, 6, 10), (5, 7, 10), (5, 8, 10)]
        arms = [(5 - t, 5 - t, 10) for t in range(1, 5)] + [(5 + t, 5 - t, 10) for t in range(1, 5)] + \
               [(5 - t, 9 + t, 10) for t in range(1, 5)] + [(5 + t, 9 + t, 10) for t in range(1, 5)]
        skel = hand_skeleton((11, 15, 12), [(5, 5, 10), (5, 9, 10)] + link + arms)
        thick = build_graph(skel, skeleton_edt(skel, 4.0))
        self.assertEqual([(n.coord, n.voxel_count) for n in thick.bifurcations()], [(VoxelCoord(5, 7, 10), 5)])
        self.assertEqual(len(thick.endpoints()), 4)
        self.assertEqual(len(thick.edges), 4)
        thin = build_graph(skel, skeleton_edt(skel, 1.0))
        self.assertEqual(len(thin.bifurcations()), 2)
        self.assertEqual(len(thin.edges), 5)
        junctions = {n.id for n in thin.bifurcations()}
        links = [e for e in thin.edges if {e.node_a, e.node_b} == junctions]
        self.assertEqual(sorted(links[0].points), [VoxelCoord(*v) for v in link])


class TestExtractGraph(unittest.TestCase):
    """Skeleton and graph of voxelized tubes"""

    def test_straight_tube(self):
        vol = tube_volume((40, 16, 16), [((5, 8, 8), (34, 8, 8), 3.0)])
        skel, graph = extract_graph(vol)
        self.assertEqual(len(graph.endpoints()), 2)
        self.assertEqual(len(graph.edges), 1)
        self.assertTrue(2.5 <= graph.edges[0].mean_radius <= 4.2)
        self.assertEqual(sum(e.branch_volume_S for e in graph.edges), vol.count())

    def test_y_tube(self):
        vol = tube_volume((40, 40, 24), [((4, 20, 12), (20, 20, 12), 2.5),
                                         ((20, 20, 12), (34, 8, 12), 2.0),
                                         ((20, 20, 12), (34, 32, 12), 2.0)])
        skel, graph = extract_graph(vol)
        self.assertEqual(len(graph.endpoints()), 3)
        self.assertGreaterEqual(len(graph.bifurcations()), 1)
        self.assertEqual(sum(e.branch_volume_S for e in graph.edges), vol.count())
        # Every foreground voxel lies near the centerline
        distances, _ = cKDTree(np.argwhere(skel.mask)).query(np.argwhere(vol.mask))
        self.assertLessEqual(float(distances.max()), 2.5 + 2.0)

    def test_phantom_trees_match_their_constructive_graph(self):
        for seed in range(5):
            with self.subTest(seed=seed):
                vol, truth = generate_phantom_tree(PhantomParams(seed=seed))
                skel, graph = extract_graph(vol)
                self.assertEqual(len(graph.endpoints()), len(truth.endpoints()))
                self.assertEqual(len(graph.bifurcations()), len(truth.bifurcations()))
                self.assertEqual(len(graph.edges), len(truth.edges))
                self.assertTrue(nx.is_connected(graph.to_networkx()))
                self.assertTrue(all(e.points for e in graph.edges))
                self.assertEqual(sum(n.voxel_count for n in graph.nodes) + sum(e.interior_count for e in graph.edges),
                                 skel.count())
                self.assertEqual(sum(e.branch_volume_S for e in graph.edges), vol.count())


class TestGraphJson(unittest.TestCase):
    """Graph documents"""

    def setUp(self):
        skel = hand_skeleton((10, 10, 10), Y_TRUNK + Y_LEFT + Y_RIGHT)
        self.graph = build_graph(skel, skeleton_edt(skel, 1.25))

    def test_round_trip(self):
        raw = export_graph_json(self.graph)
        self.assertEqual(import_graph_json(raw), self.graph)
        self.assertEqual(export_graph_json(import_graph_json(raw)), raw)

    def test_missing_edges_names_key(self):
        document = json.loads(export_graph_json(self.graph))
        del document["edges"]
        with self.assertRaises(GraphSchemaError) as caught:
            import_graph_json(json.dumps(document).encode())
        self.assertEqual(caught.exception.key, "edges")

    def test_radii_length_mismatch(self):
        document = json.loads(export_graph_json(self.graph))
        document["edges"][1]["radii"].append(1.0)
        with self.assertRaises(GraphSchemaError) as caught:
            import_graph_json(json.dumps(document).encode())
        self.assertEqual(caught.exception.key, "edges[1].radii")

    def test_invalid_json(self):
        with self.assertRaises(GraphSchemaError) as caught:
            import_graph_json(b"{nope")
        self.assertEqual(caught.exception.key, "document")

    def test_minimal_hand_document(self):
        document = {
            "version": 1, "dims": [8, 8, 8], "contains_cycles": False,
            "nodes": [{"id": 0, "coord": [0, 0, 0], "kind": "endpoint"},
                      {"id": 1, "coord": [0, 0, 4], "kind": "endpoint"}],
            "edges": [{"id": 0, "node_a": 0, "node_b": 1, "points": [[0, 0, 1], [0, 0, 2], [0, 0, 3]],
                       "radii": [1, 1.5, 1], "mean_radius": 1.1666666666666667, "length": 4.0,
                       "branch_volume_S": 5}],
        }
        graph = import_graph_json(json.dumps(document).encode())
        self.assertEqual(graph, BranchGraph(
            (8, 8, 8),
            (GraphNode(0, VoxelCoord(0, 0, 0), ENDPOINT), GraphNode(1, VoxelCoord(0, 0, 4), ENDPOINT)),
            (GraphEdge(0, 0, 1, (VoxelCoord(0, 0, 1), VoxelCoord(0, 0, 2), VoxelCoord(0, 0, 3)),
                       (1.0, 1.5, 1.0), 1.1666666666666667, 4.0, 5),),
            False))
        self.assertEqual(graph.edge(0).other(0), 1)

    def test_unknown_node_kind(self):
        document = json.loads(export_graph_json(self.graph))
        document["nodes"][0]["kind"] = "junction"
        with self.assertRaises(GraphSchemaError) as caught:
            import_graph_json(json.dumps(document).encode())
        self.assertEqual(caught.exception.key, "nodes[0].kind")


if __name__ == '__main__':
    unittest.main()
