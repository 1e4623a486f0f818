"""Whole-volume disconnection keypoint detection."""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from tuberepair.errors import EmptyVolumeError, StorageError, UsageError
from tuberepair.heatmap import DEFAULT_SIGMA, HeatmapTensor, KeypointTarget, argmax_coord, render_gaussian
from tuberepair.metrics import EvalRecord, evaluate_crop
from tuberepair.network import UNet3D, predict_heatmaps
from tuberepair.synth import DisconnectionSample
from tuberepair.training import assemble_input, component_masks, make_training_input
from tuberepair.util import PathLike, read_json, write_json
from tuberepair.volume import (LabelVolume, Volume3D, VoxelCoord, add_clipped, connected_components, crop_array,
                               crop_origin, filter_small_components)

logger = logging.getLogger(__name__)

MODES = ("pooled", "per_component")
RESULT_VERSION = 1


@dataclass(frozen=True)
class InferenceConfig:
    crops_per_component: int = 3
    noise_min_voxels: int = 5
    crop_extent: Tuple[int, int, int] = (32, 32, 32)
    mode: str = "pooled"
    seed: int = 0
    raw_input: bool = False
    batch_size: int = 8

    def __post_init__(self):
        if self.crops_per_component < 1:
            raise UsageError(f"crops_per_component must be at least 1, got {self.crops_per_component}")
        if self.mode not in MODES:
            raise UsageError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass(frozen=True, eq=False)
class CropInput:
    inputs: np.ndarray  # (C, d, h, w)
    origin: Tuple[int, int, int]


class HeatmapModel:
    """Anything that turns model input crops into K channel heatmaps of the crop extent."""

    in_channels: int = 2

    def predict(self, crops: List[CropInput]) -> List[HeatmapTensor]:
        raise NotImplementedError


class NetModel(HeatmapModel):

    def __init__(self, net: UNet3D):
        self.net = net
        self.in_channels = net.config.in_channels

    def predict(self, crops: List[CropInput]) -> List[HeatmapTensor]:
        return predict_heatmaps(self.net, [c.inputs for c in crops])


class OracleModel(HeatmapModel):
    """Renders the known keypoints of every pair into each crop, taking the voxelwise maximum over pairs."""

    def __init__(self, pairs: Sequence[Tuple[Sequence[int], Sequence[int]]], sigma: float = DEFAULT_SIGMA,
                 in_channels: int = 2):
        self.pairs = [tuple(VoxelCoord(*(int(c) for c in kp)) for kp in pair) for pair in pairs]
        self.sigma = sigma
        self.in_channels = in_channels

    def predict(self, crops: List[CropInput]) -> List[HeatmapTensor]:
        heatmaps = []
        for crop in crops:
            extent = crop.inputs.shape[1:]
            channels = np.zeros((2, *extent), dtype=np.float32)
            for pair in self.pairs:
                local = [tuple(c - o for c, o in zip(kp, crop.origin)) for kp in pair]
                channels = np.maximum(channels, render_gaussian(KeypointTarget.within(local, extent), extent,
                                                                self.sigma).data)
            heatmaps.append(HeatmapTensor(channels))
        return heatmaps


@dataclass(frozen=True)
class ComponentDetection:
    label: int
    kp1: VoxelCoord
    kp2: VoxelCoord


@dataclass(frozen=True, eq=False)
class InferenceResult:
    mode: str
    keypoints: Tuple[VoxelCoord, ...]
    per_component: Tuple[ComponentDetection, ...]
    candidate_labels: Tuple[int, ...]
    crop_centers: Tuple[Tuple[int, VoxelCoord], ...]  # (label, center)
    labels: LabelVolume
    accumulator: Optional[np.ndarray] = None  # (K, D, H, W) float64


def model_input(vol: Volume3D, labels: LabelVolume, candidate: int, center: Sequence[int], extent: Sequence[int],
                in_channels: int, raw_input: bool = False) -> CropInput:
    """Training layout crop (largest component, candidate) or, with raw_input, the raw crop in every channel."""
    origin = crop_origin(center, extent)
    if raw_input:
        raw = crop_array(vol.mask, origin, extent).astype(np.float32)
        return CropInput(np.repeat(raw[None], in_channels, axis=0), origin)
    variant = "two" if in_channels == 2 else "one"
    return CropInput(assemble_input(labels.mask(1), labels.mask(candidate), origin, extent, variant), origin)


def sample_crop_centers(labels: LabelVolume, candidates: Sequence[int], count: int,
                        rng: np.random.Generator) -> List[Tuple[int, VoxelCoord]]:
    centers = []
    for label in candidates:
        voxels = labels.coords(label)
        for pick in rng.integers(len(voxels), size=count):
            centers.append((label, VoxelCoord(*(int(c) for c in voxels[int(pick)]))))
    return centers


def detect_whole_volume(vol: Volume3D, model: HeatmapModel, config: InferenceConfig = InferenceConfig(),
                        keep_accumulator: bool = False) -> InferenceResult:
    """Detects keypoint pairs on every small component of a volume.

    Components below noise_min_voxels are dropped and the largest is the main tree; every remaining
    component gets crops_per_component seeded crops centered on its voxels. Crop heatmaps are summed into a
    full-volume accumulator at their origins, clipped at the border. Pooled mode takes the global argmax per
    channel; per_component mode takes it over the sum of each candidate's own crops.

    Raises
    ------
    EmptyVolumeError
        The volume has no foreground
    """
    if vol.count() == 0:
        raise EmptyVolumeError("cannot detect keypoints in an empty volume")
    labels = filter_small_components(connected_components(vol), config.noise_min_voxels)
    candidates = tuple(range(2, labels.count + 1))
    rng = np.random.default_rng(config.seed)
    centers = sample_crop_centers(labels, candidates, config.crops_per_component, rng)
    extent = tuple(config.crop_extent)
    per_label = {label: np.zeros((2, *vol.dims), dtype=np.float64) for label in candidates}
    for start in range(0, len(centers), config.batch_size):
        chunk = centers[start:start + config.batch_size]
        crops = [model_input(vol, labels, label, center, extent, model.in_channels, config.raw_input)
                 for label, center in chunk]
        for (label, center), crop, heatmap in zip(chunk, crops, model.predict(crops)):
            add_clipped(per_label[label], heatmap.data.astype(np.float64), crop.origin)
            logger.debug("crop at %s for component %d", tuple(center), label)
    total = np.zeros((2, *vol.dims), dtype=np.float64)
    for label in candidates:
        total += per_label[label]
    keypoints: Tuple[VoxelCoord, ...] = ()
    detections: List[ComponentDetection] = []
    if candidates:
        if config.mode == "pooled":
            keypoints = tuple(argmax_coord(channel) for channel in total)
        else:
            for label in candidates:
                kp1, kp2 = (argmax_coord(channel) for channel in per_label[label])
                detections.append(ComponentDetection(label, kp1, kp2))
            keypoints = tuple(kp for d in detections for kp in (d.kp1, d.kp2))
    logger.info("%d candidate components, %d crops, mode %s", len(candidates), len(centers), config.mode)
    return InferenceResult(config.mode, keypoints, tuple(detections), candidates, tuple(centers), labels,
                           total if keep_accumulator else None)


@dataclass(frozen=True)
class KeypointPair:
    label: int
    kp1: VoxelCoord
    kp2: VoxelCoord
    snap_distances: Tuple[float, float]
    raw: Optional[Tuple[VoxelCoord, VoxelCoord]] = field(default=None, compare=False)


def _snap(coords: np.ndarray, point: Sequence[int]) -> Tuple[VoxelCoord, float]:
    distance, index = cKDTree(coords).query(np.asarray(point, dtype=np.float64))
    return VoxelCoord(*(int(c) for c in coords[int(index)])), float(distance)


def pair_components(result: InferenceResult) -> List[KeypointPair]:
    """Snaps detected keypoints onto the volume: kp1 to the largest component, kp2 to its candidate.

    In pooled mode the candidate is the component whose voxel is nearest to kp2.
    """
    labels = result.labels
    if not result.candidate_labels or not result.keypoints:
        return []
    main = labels.coords(1)
    if result.mode == "pooled":
        kp1, kp2 = result.keypoints
        candidate_voxels = np.argwhere(labels.labels >= 2)
        nearest, _ = _snap(candidate_voxels, kp2)
        raw = [(labels.label_at(nearest), kp1, kp2)]
    else:
        raw = [(d.label, d.kp1, d.kp2) for d in result.per_component]
    pairs = []
    for label, kp1, kp2 in raw:
        voxels = labels.coords(label)
        if len(voxels) == 0 or len(main) == 0:
            logger.warning("component %d is empty, pair skipped", label)
            continue
        snapped1, distance1 = _snap(main, kp1)
        snapped2, distance2 = _snap(voxels, kp2)
        pairs.append(KeypointPair(label, snapped1, snapped2, (distance1, distance2), (kp1, kp2)))
    return pairs


def result_document(result: InferenceResult, pairs: Sequence[KeypointPair], config: InferenceConfig,
                    extra: Optional[dict] = None) -> dict:
    return {
        "version": RESULT_VERSION,
        "mode": result.mode,
        "seed": config.seed,
        "keypoints": [list(kp) for kp in result.keypoints],
        "per_component": [{"label": p.label, "kp1": list(p.kp1), "kp2": list(p.kp2),
                           "snap_distances": list(p.snap_distances)} for p in pairs],
        "config_echo": dict(dataclasses.asdict(config), **(extra or {})),
    }


def write_result(path: PathLike, document: dict) -> None:
    write_json(path, document)


def read_pairs(path: PathLike) -> List[KeypointPair]:
    """Keypoint pairs of a result JSON written by write_result."""
    try:
        document = read_json(path)
        return [KeypointPair(int(p["label"]), VoxelCoord(*p["kp1"]), VoxelCoord(*p["kp2"]),
                             tuple(float(d) for d in p["snap_distances"]))
                for p in document["per_component"]]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise StorageError(f"cannot read detections {path}: {exc}") from exc


CropCallback = Callable[[np.ndarray, HeatmapTensor, KeypointTarget, EvalRecord], None]


def evaluate_fixed_crops(samples: Sequence[DisconnectionSample],
                         model_for: Callable[[DisconnectionSample], HeatmapModel], extent: Sequence[int],
                         sigma: float = DEFAULT_SIGMA, on_crop: Optional[CropCallback] = None) -> List[EvalRecord]:
    """Runs a model on the stored crop centers of every sample and scores the argmax keypoints.

    Parameters
    ----------
    samples: Sequence[DisconnectionSample]
        Validation or test samples
    model_for: Callable[[DisconnectionSample], HeatmapModel]
        Model per sample; a trained net ignores the sample, an oracle is built from its keypoints
    extent: Sequence[int]
        Crop extent
    sigma: float
        Width of the ground-truth heatmaps handed to on_crop
    on_crop: Optional[CropCallback]
        Called with (input, prediction, target, record) for every crop

    Returns
    -------
    records: List[EvalRecord]
        One record per crop, in sample then crop order
    """
    extent = tuple(int(e) for e in extent)
    records: List[EvalRecord] = []
    for sample in samples:
        model = model_for(sample)
        variant = "two" if model.in_channels == 2 else "one"
        masks = component_masks(sample)
        crops, targets = [], []
        for center in sample.fixed_crop_centers:
            inputs, target = make_training_input(sample, center, variant, extent, masks)
            crops.append(CropInput(inputs, crop_origin(center, extent)))
            targets.append(target)
        for index, (crop, target, heatmap) in enumerate(zip(crops, targets, model.predict(crops))):
            record = evaluate_crop(heatmap, target, sample.sample_id, sample.branch_volume_S,
                                   sample.branch_mean_radius, index)
            records.append(record)
            if on_crop is not None:
                on_crop(crop.inputs, heatmap, target, record)
        logger.debug("sample %s: %d crops evaluated", sample.sample_id, len(crops))
    logger.info("evaluated %d crops of %d samples", len(records), len(samples))
    return records


def oracle_for(sample: DisconnectionSample, sigma: float = DEFAULT_SIGMA, in_channels: int = 2) -> OracleModel:
    return OracleModel([(sample.kp1, sample.kp2)], sigma, in_channels)
