"""Model inputs from disconnection samples and the training loop."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from tuberepair.checkpoint import load_checkpoint, load_net_state, load_optimizer_state, save_checkpoint
from tuberepair.errors import UsageError, ValidationError
from tuberepair.heatmap import DEFAULT_SIGMA, KeypointTarget, render_gaussian
from tuberepair.network import Detector, NetConfig, UNet3D, batch_kmse_gradient, kmse_torch, to_tensor
from tuberepair.optim import DEFAULT_BETAS, DEFAULT_EPS, DEFAULT_LR, DEFAULT_WEIGHT_DECAY, AdamW
from tuberepair.synth import DisconnectionSample
from tuberepair.util import PathLike, write_json
from tuberepair.volume import VoxelCoord, connected_components, crop_array, crop_origin

logger = logging.getLogger(__name__)

VARIANTS = ("one", "two")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    crop_extent: Tuple[int, int, int] = (32, 32, 32)
    epochs: int = 100
    patience: int = 5
    seed: int = 0
    lr: float = DEFAULT_LR
    betas: Tuple[float, float] = DEFAULT_BETAS
    eps: float = DEFAULT_EPS
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    sigma: float = DEFAULT_SIGMA
    max_steps: Optional[int] = None
    init_from: Optional[str] = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise UsageError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.epochs < 1 or self.patience < 0:
            raise UsageError("epochs must be positive and patience non-negative")


@dataclass(frozen=True, eq=False)
class ComponentMasks:
    """Largest component and the kp2 component of a disconnected volume; other components are noise."""
    largest: np.ndarray
    detached: np.ndarray


def component_masks(sample: DisconnectionSample) -> ComponentMasks:
    labels = connected_components(sample.disconnected)
    if labels.count == 0:
        raise ValidationError(f"sample {sample.sample_id} has no foreground")
    detached = labels.label_at(sample.kp2)
    if detached in (0, 1):
        raise ValidationError(f"kp2 of sample {sample.sample_id} is not on a detached component")
    return ComponentMasks(labels.mask(1), labels.mask(detached))


def assemble_input(largest: np.ndarray, detached: np.ndarray, origin: Sequence[int], extent: Sequence[int],
                   variant: str) -> np.ndarray:
    """Model input crop: two channels (largest, detached) or their union as one channel."""
    if variant not in VARIANTS:
        raise UsageError(f"variant must be one of {VARIANTS}, got {variant!r}")
    first = crop_array(largest, origin, extent).astype(np.float32)
    second = crop_array(detached, origin, extent).astype(np.float32)
    if variant == "two":
        return np.stack([first, second])
    return np.maximum(first, second)[None]


def make_training_input(sample: DisconnectionSample, crop_center: Sequence[int], variant: str = "two",
                        extent: Sequence[int] = (32, 32, 32),
                        masks: Optional[ComponentMasks] = None) -> Tuple[np.ndarray, KeypointTarget]:
    """Input crop around crop_center and the keypoints in the crop frame.

    Returns
    -------
    input, target: Tuple[np.ndarray, KeypointTarget]
        (C, d, h, w) float32 input; keypoint visibility is the crop bounds check
    """
    if not sample.disconnected.contains(crop_center):
        raise ValidationError(f"crop center {tuple(crop_center)} outside volume {sample.disconnected.dims}")
    masks = masks or component_masks(sample)
    origin = crop_origin(crop_center, extent)
    inputs = assemble_input(masks.largest, masks.detached, origin, extent, variant)
    local = [tuple(int(c) - o for c, o in zip(kp, origin)) for kp in (sample.kp1, sample.kp2)]
    return inputs, KeypointTarget.within(local, extent)


def random_crop_center(masks: ComponentMasks, rng: np.random.Generator) -> VoxelCoord:
    voxels = np.argwhere(masks.detached)
    return VoxelCoord(*(int(c) for c in voxels[int(rng.integers(len(voxels)))]))


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    steps: int


@dataclass
class TrainResult:
    net: UNet3D
    epochs: List[EpochRecord] = field(default_factory=list)
    step_losses: List[float] = field(default_factory=list)
    best_epoch: int = 0
    stop_reason: str = ""
    optimizer: Optional[torch.optim.Optimizer] = None  # Moments as of the last step

    def curve_document(self, seed: int, config: Optional[dict] = None) -> dict:
        return {
            "version": 1,
            "seed": seed,
            "config": config or {},
            "epochs": [vars(e) for e in self.epochs],
            "best_epoch": self.best_epoch,
            "stop_reason": self.stop_reason,
            "steps": len(self.step_losses),
        }


def _targets(batch: List[Tuple[np.ndarray, KeypointTarget]], extent, sigma: float, dtype) -> Tuple[torch.Tensor, ...]:
    inputs = to_tensor([x for x, _ in batch], dtype)
    heatmaps = to_tensor([render_gaussian(t, extent, sigma).data for _, t in batch], dtype)
    visibility = torch.tensor([list(t.visibility) for _, t in batch], dtype=torch.bool)
    return inputs, heatmaps, visibility


def evaluation_loss(net: UNet3D, crops: List[Tuple[np.ndarray, KeypointTarget]], extent, sigma: float,
                    batch_size: int) -> float:
    """Mean per crop KMSE in inference mode."""
    if not crops:
        return math.nan
    net.eval()
    losses: List[float] = []
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        for start in range(0, len(crops), batch_size):
            inputs, heatmaps, visibility = _targets(crops[start:start + batch_size], extent, sigma, dtype)
            losses.extend(kmse_torch(net(inputs), heatmaps, visibility).tolist())
    return math.fsum(losses) / len(losses)


def fixed_crops(samples: Sequence[DisconnectionSample], variant: str,
                extent: Sequence[int]) -> List[Tuple[np.ndarray, KeypointTarget]]:
    """Inputs of the stored crop centers of validation or test samples."""
    crops = []
    for sample in samples:
        masks = component_masks(sample)
        for center in sample.fixed_crop_centers:
            crops.append(make_training_input(sample, center, variant, extent, masks))
    return crops


def train(train_samples: Sequence[DisconnectionSample], val_samples: Sequence[DisconnectionSample],
          net_config: NetConfig = NetConfig(), config: TrainConfig = TrainConfig()) -> TrainResult:
    """Trains a detector from scratch or from config.init_from, restoring its optimizer moments if stored.

    Every step draws a fresh crop center uniformly from each sample's kp2 component. Validation runs on the
    stored crop centers after each epoch; without validation samples the epoch's training loss is used.
    Training stops after more than ``patience`` epochs without improvement, after ``epochs`` epochs or at
    ``max_steps``, and the net of the best epoch is returned.

    Raises
    ------
    UsageError
        No training samples
    IncompatibleCheckpointError
        init_from does not match the architecture
    """
    if not train_samples:
        raise UsageError("no training samples")
    extent = tuple(config.crop_extent)
    if any(e % net_config.divisor for e in extent):
        raise UsageError(f"crop extent {extent} not divisible by {net_config.divisor}")
    variant = net_config.variant
    rng = np.random.default_rng(config.seed)
    net = UNet3D(net_config)
    logger.info("network %s with %d parameters", net_config.variant, net.parameter_count())
    detector = Detector(net)
    optimizer = AdamW(net.parameters(), config.lr, config.betas, config.eps, config.weight_decay)
    if config.init_from:
        checkpoint = load_checkpoint(config.init_from)
        load_net_state(net, checkpoint)
        load_optimizer_state(optimizer, net, checkpoint)
        logger.info("initialized from %s", config.init_from)
    masks = [component_masks(s) for s in train_samples]
    val_crops = fixed_crops(val_samples, variant, extent)
    result = TrainResult(net, optimizer=optimizer)
    best_loss, best_state, stale = math.inf, copy.deepcopy(net.state_dict()), 0

    for epoch in range(1, config.epochs + 1):
        net.train()
        epoch_losses: List[float] = []
        order = rng.permutation(len(train_samples))
        for start in range(0, len(order), config.batch_size):
            batch = []
            for index in order[start:start + config.batch_size]:
                sample, sample_masks = train_samples[int(index)], masks[int(index)]
                center = random_crop_center(sample_masks, rng)
                batch.append(make_training_input(sample, center, variant, extent, sample_masks))
            inputs, heatmaps, visibility = _targets(batch, extent, config.sigma, next(net.parameters()).dtype)
            optimizer.zero_grad(set_to_none=False)
            output = detector.forward(inputs)
            with torch.no_grad():
                loss = float(kmse_torch(output, heatmaps, visibility).mean())
                gradient = batch_kmse_gradient(output, heatmaps, visibility)
            detector.backward(gradient)
            optimizer.step()
            epoch_losses.append(loss)
            result.step_losses.append(loss)
            logger.debug("epoch %d step %d loss %.6g", epoch, len(result.step_losses), loss)
            if config.max_steps is not None and len(result.step_losses) >= config.max_steps:
                break
        train_loss = math.fsum(epoch_losses) / len(epoch_losses)
        val_loss = evaluation_loss(net, val_crops, extent, config.sigma, config.batch_size) if val_crops else train_loss
        result.epochs.append(EpochRecord(epoch, train_loss, val_loss, len(result.step_losses)))
        logger.info("epoch %d: train %.6g, validation %.6g", epoch, train_loss, val_loss)
        if val_loss < best_loss:
            best_loss, best_state, stale = val_loss, copy.deepcopy(net.state_dict()), 0
            result.best_epoch = epoch
        else:
            stale += 1
        if config.max_steps is not None and len(result.step_losses) >= config.max_steps:
            result.stop_reason = "max_steps"
            break
        if stale > config.patience:
            result.stop_reason = "early_stopping"
            break
    else:
        result.stop_reason = "epochs"
    net.load_state_dict(best_state)
    net.eval()
    logger.info("training stopped (%s), best epoch %d, validation %.6g", result.stop_reason, result.best_epoch,
                best_loss)
    return result


def save_training(result: TrainResult, path: PathLike, seed: int, config: Optional[dict] = None) -> None:
    """Checkpoint with the optimizer moments at path and the loss curve at <path>.curve.json."""
    save_checkpoint(result.net, path, result.optimizer)
    write_json(f"{path}.curve.json", result.curve_document(seed, config))

