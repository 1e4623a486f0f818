import dataclasses
import os
import tempfile
import unittest

import numpy as np

from tuberepair.checkpoint import OPTIM_PREFIX, load_checkpoint
from tuberepair.errors import UsageError, ValidationError
from tuberepair.inference import NetModel, evaluate_fixed_crops
from tuberepair.network import NetConfig
from tuberepair.synth import DisconnectionSample, carve_gap
from tuberepair.skeleton import GraphEdge
from tuberepair.training import (TrainConfig, assemble_input, component_masks, make_training_input, save_training,
                                 train)
from tuberepair.util import read_json
from tuberepair.volume import Volume3D, VoxelCoord, connected_components, paint_capsule


def tube_and_edge():
    mask = np.zeros((40, 20, 20), dtype=bool)
    paint_capsule(mask, (4, 10, 10), (35, 10, 10), 2.0)
    points = tuple(VoxelCoord(z, 10, 10) for z in range(5, 35))
    edge = GraphEdge(0, 0, 1, points, tuple(2.0 for _ in points), 2.0, 31.0, int(mask.sum()))
    return Volume3D(mask), edge


def tube_sample(kp1_index, kp2_index, split="train", sample_id=None):
    """Break of a straight tube; the kp1 side is the larger piece for kp indices past the middle."""
    vol, edge = tube_and_edge()
    carve = carve_gap(vol, edge, kp1_index, kp2_index)
    labels = connected_components(carve.volume)
    kp1, kp2 = edge.points[kp1_index], edge.points[kp2_index]
    centers = (kp2, kp2, kp2) if split != "train" else ()
    return DisconnectionSample(sample_id or f"tube_{kp1_index}_{kp2_index}", "tube", 0, kp1, kp2, kp1_index,
                               kp2_index, carve.gap_radius, carve.volume, 2.0, edge.branch_volume_S,
                               labels.label_at(kp1), labels.label_at(kp2), split, centers, carve.removed)


def small_net_config(**changes):
    values = dict(base_width=4, stages=3, seed=0)
    values.update(changes)
    return NetConfig(**values)


class TestTrainingInput(unittest.TestCase):

    def setUp(self):
        self.sample = tube_sample(20, 24)

    def test_two_channels_centered_on_kp2(self):
        inputs, target = make_training_input(self.sample, self.sample.kp2, "two", (16, 16, 16))
        self.assertEqual((2, 16, 16, 16), inputs.shape)
        self.assertEqual(np.float32, inputs.dtype)
        self.assertEqual(VoxelCoord(8, 8, 8), target.coords[1])
        self.assertEqual(VoxelCoord(4, 8, 8), target.coords[0])
        self.assertEqual((True, True), target.visibility)
        self.assertEqual(1.0, inputs[0][target.coords[0]])
        self.assertEqual(1.0, inputs[1][target.coords[1]])
        self.assertEqual(0.0, float((inputs[0] * inputs[1]).sum()))

    def test_one_channel_is_union(self):
        two, _ = make_training_input(self.sample, self.sample.kp2, "two", (16, 16, 16))
        one, _ = make_training_input(self.sample, self.sample.kp2, "one", (16, 16, 16))
        self.assertEqual((1, 16, 16, 16), one.shape)
        np.testing.assert_array_equal(np.maximum(two[0], two[1]), one[0])

    def test_keypoint_outside_crop_is_invisible(self):
        _, target = make_training_input(self.sample, self.sample.kp2, "two", (4, 4, 4))
        self.assertEqual((False, True), target.visibility)
        self.assertEqual(VoxelCoord(-2, 2, 2), target.coords[0])

    def test_crop_beyond_border_is_zero_filled(self):
        inputs, _ = make_training_input(self.sample, VoxelCoord(37, 10, 10), "two", (16, 16, 16))
        self.assertEqual(0.0, float(inputs[:, 13:].sum()))

    def test_center_outside_volume(self):
        with self.assertRaises(ValidationError):
            make_training_input(self.sample, VoxelCoord(40, 0, 0), "two", (16, 16, 16))

    def test_kp2_on_largest_component(self):
        sample = dataclasses.replace(self.sample, kp2=self.sample.kp1)
        with self.assertRaises(ValidationError):
            component_masks(sample)

    def test_unknown_variant(self):
        masks = component_masks(self.sample)
        with self.assertRaises(UsageError):
            assemble_input(masks.largest, masks.detached, (0, 0, 0), (4, 4, 4), "three")


class TestTrain(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.train_samples = [tube_sample(18, 22), tube_sample(20, 24), tube_sample(22, 27)]
        cls.val_samples = [tube_sample(21, 25, split="val")]

    def test_requires_samples_and_divisible_crop(self):
        with self.assertRaises(UsageError):
            train([], [], small_net_config(), TrainConfig())
        with self.assertRaises(UsageError):
            train(self.train_samples, [], small_net_config(), TrainConfig(crop_extent=(12, 12, 12)))

    def test_max_steps(self):
        config = TrainConfig(batch_size=1, crop_extent=(16, 16, 16), epochs=5, max_steps=3)
        result = train(self.train_samples, self.val_samples, small_net_config(), config)
        self.assertEqual(3, len(result.step_losses))
        self.assertEqual("max_steps", result.stop_reason)
        self.assertEqual(1, len(result.epochs))
        self.assertFalse(result.net.training)

    def test_zero_patience_stops_after_first_non_improvement(self):
        config = TrainConfig(batch_size=3, crop_extent=(16, 16, 16), epochs=6, patience=0)
        result = train(self.train_samples, self.val_samples, small_net_config(), config)
        if result.stop_reason == "early_stopping":
            self.assertEqual(result.best_epoch + 1, len(result.epochs))
        else:
            self.assertEqual("epochs", result.stop_reason)
            self.assertEqual(6, len(result.epochs))
        losses = [e.val_loss for e in result.epochs]
        self.assertEqual(min(losses), result.epochs[result.best_epoch - 1].val_loss)

    def test_deterministic(self):
        config = TrainConfig(batch_size=2, crop_extent=(16, 16, 16), epochs=2, seed=4)
        first = train(self.train_samples, self.val_samples, small_net_config(), config)
        second = train(self.train_samples, self.val_samples, small_net_config(), config)
        self.assertEqual(first.step_losses, second.step_losses)

    def test_loss_decreases(self):
        """A few dozen steps on three samples halve the training loss."""
        config = TrainConfig(batch_size=3, crop_extent=(16, 16, 16), epochs=100, patience=100, lr=5e-3,
                             max_steps=60)
        result = train(self.train_samples, [], small_net_config(), config)
        self.assertEqual(60, len(result.step_losses))
        final = sum(result.step_losses[-5:]) / 5
        self.assertLess(final, 0.5 * result.step_losses[0])

    def test_overfits_five_samples(self):
        """Five breaks of one tube are learned to within two voxels."""
        samples = [tube_sample(a, b, split="val", sample_id=f"fit_{a}_{b}")
                   for a, b in ((14, 18), (16, 21), (18, 22), (20, 24), (22, 27))]
        config = TrainConfig(batch_size=5, crop_extent=(32, 32, 32), epochs=500, patience=500, lr=5e-3,
                             max_steps=500, seed=2)
        result = train(samples, [], small_net_config(base_width=8), config)
        losses = result.step_losses
        self.assertLessEqual(len(losses), 500)
        self.assertLess(sum(losses[-10:]) / 10, 0.01 * losses[0])
        windows = [sum(losses[i:i + 100]) / len(losses[i:i + 100]) for i in range(0, len(losses), 100)]
        for earlier, later in zip(windows, windows[1:]):
            self.assertLessEqual(later, 1.1 * earlier)
        records = evaluate_fixed_crops(samples, lambda _: NetModel(result.net), (32, 32, 32))
        self.assertEqual(15, len(records))
        for record in records:
            self.assertEqual((True, True), record.visibility)
            self.assertLessEqual(max(record.distances), 2.0, record.sample_id)

    def test_save_training_and_init_from(self):
        config = TrainConfig(batch_size=3, crop_extent=(16, 16, 16), epochs=1, seed=1)
        result = train(self.train_samples, self.val_samples, small_net_config(), config)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "det.ckpt")
            save_training(result, path, 1, {"note": "unit"})
            curve = read_json(path + ".curve.json")
            self.assertEqual(1, curve["seed"])
            self.assertEqual(1, len(curve["epochs"]))
            self.assertEqual({"note": "unit"}, curve["config"])
            self.assertEqual(4, load_checkpoint(path).net_config().base_width)
            resumed = train(self.train_samples, self.val_samples, small_net_config(),
                            dataclasses.replace(config, init_from=path, max_steps=1))
            self.assertEqual(1, len(resumed.step_losses))

    def test_resume_restores_optimizer_moments(self):
        config = TrainConfig(batch_size=3, crop_extent=(16, 16, 16), epochs=2, seed=1)
        result = train(self.train_samples, [], small_net_config(), config)
        saved_steps = {s["step"] for s in result.optimizer.state.values()}
        self.assertEqual({2}, saved_steps)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "det.ckpt")
            save_training(result, path, 1)
            self.assertTrue(any(name.startswith(OPTIM_PREFIX) for name in load_checkpoint(path).tensors))
            resumed = train(self.train_samples, [], small_net_config(),
                            dataclasses.replace(config, init_from=path, max_steps=1))
        self.assertEqual({3}, {s["step"] for s in resumed.optimizer.state.values()})
        fresh = train(self.train_samples, [], small_net_config(), dataclasses.replace(config, max_steps=1))
        self.assertEqual({1}, {s["step"] for s in fresh.optimizer.state.values()})


if __name__ == '__main__':
    unittest.main()
