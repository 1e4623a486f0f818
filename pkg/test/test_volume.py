import math
import os
import struct
import tempfile
import unittest
from collections import deque

import numpy as np

from tuberepair.errors import (MalformedHeaderError, NoComponentsError, OutOfBoundsError, PayloadSizeError,
                               UnsupportedVersionError, ValidationError, VolumeFormatError)
from tuberepair.volume import (BTV_HEADER, Volume3D, VoxelCoord, add_clipped, ball_structure, capsule_region,
                               connected_components, crop_centered, decode_volume, dilate_ball, encode_volume,
                               erode_ball, euclidean_distance_transform, filter_small_components, paint_capsule,
                               read_volume, remove_largest_component, write_volume)


def flood_fill_components(mask, offsets):
    """Reference labelling: list of voxel sets, one per component."""
    seen = np.zeros(mask.shape, dtype=bool)
    components = []
    for start in zip(*np.nonzero(mask)):
        if seen[start]:
            continue
        seen[start] = True
        queue, members = deque([start]), {start}
        while queue:
            z, y, x = queue.popleft()
            for dz, dy, dx in offsets:
                n = (z + dz, y + dy, x + dx)
                if all(0 <= c < s for c, s in zip(n, mask.shape)) and mask[n] and not seen[n]:
                    seen[n] = True
                    members.add(n)
                    queue.append(n)
        components.append(members)
    return components


def neighbour_offsets(connectivity):
    offsets = []
    for dz in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                order = abs(dz) + abs(dy) + abs(dx)
                if order == 0:
                    continue
                if connectivity == 6 and order > 1 or connectivity == 18 and order > 2:
                    continue
                offsets.append((dz, dy, dx))
    return offsets


def brute_force_dilation(mask, radius):
    out = np.zeros_like(mask)
    reach = int(math.floor(radius))
    for z, y, x in zip(*np.nonzero(mask)):
        for dz in range(-reach, reach + 1):
            for dy in range(-reach, reach + 1):
                for dx in range(-reach, reach + 1):
                    if dz * dz + dy * dy + dx * dx > radius * radius:
                        continue
                    n = (z + dz, y + dy, x + dx)
                    if all(0 <= c < s for c, s in zip(n, mask.shape)):
                        out[n] = True
    return out


def brute_force_edt(mask):
    padded = np.pad(mask, 1)
    background = np.argwhere(~padded).astype(float)
    out = np.zeros(mask.shape)
    for voxel in np.argwhere(mask):
        delta = background - (voxel + 1)
        out[tuple(voxel)] = math.sqrt(float(np.min(np.sum(delta * delta, axis=1))))
    return out


def random_mask(rng, shape, density):
    return rng.random(shape) < density


class TestVolume3D(unittest.TestCase):

    def test_data_is_read_only_copy(self):
        source = np.zeros((2, 3, 4), dtype=bool)
        vol = Volume3D(source)
        source[0, 0, 0] = True
        self.assertEqual(vol.count(), 0)
        self.assertEqual(vol.dims, (2, 3, 4))
        with self.assertRaises(ValueError):
            vol.data[0, 0, 0] = True

    def test_invalid_shapes_and_spacing(self):
        with self.assertRaises(ValidationError):
            Volume3D(np.zeros((2, 2), dtype=bool))
        with self.assertRaises(ValidationError):
            Volume3D(np.zeros((0, 2, 2), dtype=bool))
        with self.assertRaises(ValidationError):
            Volume3D(np.zeros((2, 2, 2), dtype=bool), (1.0, 0.0, 1.0))

    def test_dtype_normalisation(self):
        self.assertTrue(Volume3D(np.ones((1, 1, 2), dtype=np.int64)).is_binary)
        self.assertEqual(Volume3D(np.ones((1, 1, 2))).data.dtype, np.float32)


class TestConnectedComponents(unittest.TestCase):

    def test_single_voxel(self):
        mask = np.zeros((3, 3, 3), dtype=bool)
        mask[1, 1, 1] = True
        lab = connected_components(Volume3D(mask))
        self.assertEqual(lab.component_sizes, {1: 1})

    def test_diagonal_pair_by_connectivity(self):
        mask = np.zeros((2, 2, 2), dtype=bool)
        mask[0, 0, 0] = mask[1, 1, 1] = True
        self.assertEqual(connected_components(Volume3D(mask), 26).count, 1)
        self.assertEqual(connected_components(Volume3D(mask), 18).count, 2)
        self.assertEqual(connected_components(Volume3D(mask), 6).count, 2)

    def test_parallel_tubes_ordered_by_size(self):
        mask = np.zeros((20, 12, 12), dtype=bool)
        mask[2:10, 3, 3] = True
        mask[0:18, 3, 8] = True
        lab = connected_components(Volume3D(mask))
        self.assertEqual(lab.component_sizes, {1: 18, 2: 8})
        self.assertEqual(lab.label_at((0, 3, 8)), 1)
        self.assertEqual(lab.label_at((5, 3, 3)), 2)

    def test_tie_goes_to_smaller_linear_index(self):
        mask = np.zeros((1, 5, 5), dtype=bool)
        mask[0, 4, 0:3] = True
        mask[0, 0, 2:5] = True
        lab = connected_components(Volume3D(mask))
        self.assertEqual(lab.label_at((0, 0, 2)), 1)
        self.assertEqual(lab.label_at((0, 4, 0)), 2)

    def test_empty_volume(self):
        lab = connected_components(Volume3D(np.zeros((4, 4, 4), dtype=bool)))
        self.assertEqual(lab.count, 0)

    def test_matches_flood_fill(self):
        """Components partition the foreground exactly like a breadth first flood fill."""
        rng = np.random.default_rng(3)
        for trial in range(12):
            shape = tuple(int(s) for s in rng.integers(4, 11, size=3))
            mask = random_mask(rng, shape, 0.3)
            for connectivity in (6, 18, 26):
                lab = connected_components(Volume3D(mask), connectivity)
                expected = flood_fill_components(mask, neighbour_offsets(connectivity))
                self.assertEqual(lab.count, len(expected))
                found = []
                for label in range(1, lab.count + 1):
                    found.append({tuple(int(c) for c in v) for v in lab.coords(label)})
                    self.assertEqual(lab.component_sizes[label], len(found[-1]))
                self.assertEqual(sorted(map(sorted, found)), sorted(map(sorted, expected)))
                sizes = [lab.component_sizes[label] for label in range(1, lab.count + 1)]
                self.assertEqual(sizes, sorted(sizes, reverse=True))


class TestComponentFilters(unittest.TestCase):

    def components_of_sizes(self, sizes):
        mask = np.zeros((len(sizes) * 2, 1, max(sizes)), dtype=bool)
        for row, size in enumerate(sizes):
            mask[row * 2, 0, :size] = True
        return connected_components(Volume3D(mask))

    def test_min_voxels_one_is_identity(self):
        lab = self.components_of_sizes([6, 2, 1])
        filtered = filter_small_components(lab, 1)
        self.assertEqual(filtered.component_sizes, lab.component_sizes)
        np.testing.assert_array_equal(filtered.labels, lab.labels)

    def test_threshold(self):
        self.assertEqual(filter_small_components(self.components_of_sizes([100, 3]), 5).component_sizes, {1: 100})
        self.assertEqual(filter_small_components(self.components_of_sizes([50, 5, 4]), 5).component_sizes,
                         {1: 50, 2: 5})

    def test_remove_largest(self):
        self.assertEqual(remove_largest_component(self.components_of_sizes([100, 7, 3])).component_sizes,
                         {1: 7, 2: 3})
        self.assertEqual(remove_largest_component(self.components_of_sizes([4])).count, 0)

    def test_remove_largest_of_nothing(self):
        lab = connected_components(Volume3D(np.zeros((2, 2, 2), dtype=bool)))
        with self.assertRaisesRegex(NoComponentsError, "no components"):
            remove_largest_component(lab)


class TestCrop(unittest.TestCase):

    def test_origin_arithmetic(self):
        vol = Volume3D(np.zeros((100, 100, 100), dtype=bool))
        self.assertEqual(crop_centered(vol, VoxelCoord(50, 50, 50), (80, 80, 80)).origin, (10, 10, 10))

    def test_full_extent_identity(self):
        rng = np.random.default_rng(0)
        vol = Volume3D(random_mask(rng, (5, 7, 9), 0.5))
        crop = crop_centered(vol, (2, 3, 4), (5, 7, 9))
        self.assertEqual(crop.origin, (0, 0, 0))
        np.testing.assert_array_equal(crop.data, vol.data)

    def test_corner_zero_fill_and_mapping(self):
        vol = Volume3D(np.ones((6, 6, 6), dtype=bool))
        crop = crop_centered(vol, (0, 0, 0), (4, 4, 4))
        self.assertEqual(crop.origin, (-2, -2, -2))
        self.assertEqual(int(crop.data.sum()), 8)
        self.assertFalse(crop.data[0, 3, 3])
        self.assertTrue(crop.data[2, 2, 2])
        self.assertEqual(crop.to_parent((2, 3, 2)), VoxelCoord(0, 1, 0))

    def test_lossless_in_bounds(self):
        rng = np.random.default_rng(5)
        vol = Volume3D(rng.random((9, 8, 7)).astype(np.float32))
        crop = crop_centered(vol, (7, 1, 3), (6, 5, 4))
        for local in np.ndindex(*crop.extent):
            parent = crop.to_parent(local)
            if vol.contains(parent):
                self.assertEqual(crop.data[local], vol.at(parent))
            else:
                self.assertEqual(crop.data[local], 0)

    def test_center_outside(self):
        with self.assertRaises(OutOfBoundsError):
            crop_centered(Volume3D(np.zeros((4, 4, 4), dtype=bool)), (4, 0, 0), (2, 2, 2))

    def test_add_clipped(self):
        accumulator = np.zeros((2, 4, 4, 4))
        add_clipped(accumulator, np.ones((2, 3, 3, 3)), (-1, 2, 1))
        self.assertEqual(accumulator.sum(), 2 * 2 * 2 * 3)
        add_clipped(accumulator, np.ones((2, 3, 3, 3)), (10, 0, 0))
        self.assertEqual(accumulator.sum(), 24)


class TestMorphology(unittest.TestCase):

    def test_radius_zero_identity(self):
        rng = np.random.default_rng(1)
        vol = Volume3D(random_mask(rng, (6, 6, 6), 0.4))
        self.assertEqual(dilate_ball(vol, 0), vol)
        self.assertEqual(erode_ball(vol, 0), vol)

    def test_single_voxel_plus_sign(self):
        mask = np.zeros((5, 5, 5), dtype=bool)
        mask[2, 2, 2] = True
        dilated = dilate_ball(Volume3D(mask), 1)
        self.assertEqual(dilated.count(), 7)
        self.assertTrue(dilated.at((1, 2, 2)))
        self.assertFalse(dilated.at((1, 1, 2)))

    def test_closing_is_extensive(self):
        size = 17
        ball = np.zeros((size, size, size), dtype=bool)
        ball[3:14, 3:14, 3:14] = ball_structure(5)
        vol = Volume3D(ball)
        closed = erode_ball(dilate_ball(vol, 2), 2)
        self.assertTrue(np.all(closed.data[ball]))

    def test_dilation_matches_set_oracle(self):
        rng = np.random.default_rng(11)
        for trial in range(8):
            mask = random_mask(rng, (7, 8, 6), 0.05)
            radius = float(rng.choice([1.0, 1.5, 2.0, 2.3]))
            np.testing.assert_array_equal(dilate_ball(Volume3D(mask), radius).data, brute_force_dilation(mask, radius))

    def test_monotone_anti_extensive_and_dual(self):
        rng = np.random.default_rng(12)
        for trial in range(6):
            inner = random_mask(rng, (6, 6, 6), 0.4)
            a = np.pad(inner, 2)
            b = a | np.pad(random_mask(rng, (6, 6, 6), 0.2), 2)
            self.assertTrue(np.all(dilate_ball(Volume3D(b), 2).data[dilate_ball(Volume3D(a), 2).data]))
            eroded = erode_ball(Volume3D(a), 2).data
            self.assertFalse(np.any(eroded & ~a))
            dual = ~dilate_ball(Volume3D(~a), 2).data
            np.testing.assert_array_equal(eroded, dual)


class TestDistanceTransform(unittest.TestCase):

    def test_background_is_zero(self):
        self.assertEqual(float(euclidean_distance_transform(Volume3D(np.zeros((3, 3, 3), dtype=bool))).max()), 0.0)

    def test_single_voxel(self):
        mask = np.zeros((3, 3, 3), dtype=bool)
        mask[1, 1, 1] = True
        self.assertEqual(euclidean_distance_transform(Volume3D(mask))[1, 1, 1], 1.0)

    def test_ball_center(self):
        """The nearest voxel outside a radius 4 ball sits at offset (4, 1, 0)."""
        ball = np.zeros((13, 13, 13), dtype=bool)
        ball[2:11, 2:11, 2:11] = ball_structure(4)
        distances = euclidean_distance_transform(Volume3D(ball))
        self.assertAlmostEqual(distances[6, 6, 6], math.sqrt(17), places=12)

    def test_full_volume_uses_outside_as_background(self):
        distances = euclidean_distance_transform(Volume3D(np.ones((1, 1, 5), dtype=bool)))
        self.assertEqual(distances.tolist(), [[[1.0, 1.0, 1.0, 1.0, 1.0]]])

    def test_spacing(self):
        mask = np.ones((1, 1, 5), dtype=bool)
        distances = euclidean_distance_transform(Volume3D(mask, (3.0, 3.0, 0.5)))
        self.assertAlmostEqual(distances[0, 0, 2], 1.5)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(21)
        for trial in range(10):
            shape = tuple(int(s) for s in rng.integers(3, 9, size=3))
            mask = random_mask(rng, shape, 0.7)
            np.testing.assert_allclose(euclidean_distance_transform(Volume3D(mask)), brute_force_edt(mask),
                                       rtol=0, atol=1e-12)


class TestCapsule(unittest.TestCase):

    def test_axis_aligned_capsule_matches_exact_distance(self):
        mask = np.zeros((20, 9, 9), dtype=bool)
        added = paint_capsule(mask, (4, 4, 4), (14, 4, 4), 2.0)
        expected = np.zeros_like(mask)
        for z, y, x in np.ndindex(*mask.shape):
            axial = 4 - z if z < 4 else (z - 14 if z > 14 else 0)
            expected[z, y, x] = axial * axial + (y - 4) ** 2 + (x - 4) ** 2 <= 4
        np.testing.assert_array_equal(mask, expected)
        self.assertEqual(added, int(expected.sum()))

    def test_degenerate_segment_is_ball(self):
        slices, region = capsule_region((9, 9, 9), (4, 4, 4), (4, 4, 4), 2.0)
        np.testing.assert_array_equal(region, ball_structure(2.0))

    def test_clipped_at_border(self):
        mask = np.zeros((4, 4, 4), dtype=bool)
        paint_capsule(mask, (0, 0, 0), (0, 0, 0), 1.0)
        self.assertEqual(int(mask.sum()), 4)


class TestVolumeFile(unittest.TestCase):

    def setUp(self):
        self.directory = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.directory.name, "volume.btv")

    def tearDown(self):
        self.directory.cleanup()

    def test_round_trip(self):
        rng = np.random.default_rng(2)
        for vol in (Volume3D(random_mask(rng, (3, 4, 5), 0.5), (0.5, 0.7, 1.25)),
                    Volume3D(rng.standard_normal((2, 3, 4)).astype(np.float32))):
            write_volume(vol, self.path)
            self.assertEqual(read_volume(self.path), vol)

    def test_hand_built_fixture(self):
        header = struct.pack("<4sI3I3dB", b"BTV1", 1, 2, 2, 2, 1.0, 1.0, 1.0, 0)
        vol = decode_volume(header + bytes([0, 1, 0, 0, 0, 0, 1, 1]))
        self.assertEqual(vol.dims, (2, 2, 2))
        self.assertTrue(vol.at((0, 0, 1)))
        self.assertTrue(vol.at((1, 1, 0)))
        self.assertTrue(vol.at((1, 1, 1)))
        self.assertEqual(vol.count(), 3)

    def test_truncated_payload(self):
        raw = encode_volume(Volume3D(np.ones((2, 2, 2), dtype=bool)))
        with self.assertRaisesRegex(PayloadSizeError, "payload size mismatch"):
            decode_volume(raw[:-1])

    def test_header_errors_are_distinct(self):
        raw = encode_volume(Volume3D(np.ones((2, 2, 2), dtype=bool)))
        with self.assertRaises(MalformedHeaderError):
            decode_volume(raw[:10])
        with self.assertRaises(MalformedHeaderError):
            decode_volume(b"XXXX" + raw[4:])
        with self.assertRaises(UnsupportedVersionError):
            decode_volume(raw[:4] + struct.pack("<I", 2) + raw[8:])
        with self.assertRaises(VolumeFormatError):
            decode_volume(raw[:BTV_HEADER.size] + bytes([2] * 8))


if __name__ == '__main__':
    unittest.main()
