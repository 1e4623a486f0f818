"""3D U-Net heatmap detector."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from torch import nn

from tuberepair.errors import BackwardBeforeForwardError, ShapeMismatchError, UsageError
from tuberepair.heatmap import KEYPOINTS, HeatmapTensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NetConfig:
    """Architecture of the detector.

    Encoder stage i has base_width * 2**i channels, the bottleneck base_width * 2**stages. Input extents
    must be divisible by 2**stages.
    """
    in_channels: int = 2
    out_channels: int = KEYPOINTS
    base_width: int = 16
    stages: int = 3
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.in_channels not in (1, 2):
            raise UsageError(f"in_channels must be 1 or 2, got {self.in_channels}")
        if self.base_width < 1 or self.stages < 1 or self.out_channels < 1:
            raise UsageError("base_width, stages and out_channels must be positive")

    @property
    def divisor(self) -> int:
        return 2 ** self.stages

    @property
    def variant(self) -> str:
        return "two" if self.in_channels == 2 else "one"


def conv_block(in_ch: int, out_ch: int, config: NetConfig) -> nn.Sequential:
    """Two 3x3x3 convolutions, each followed by batch normalization and ReLU."""
    return nn.Sequential(
        nn.Conv3d(in_ch, out_ch, 3, padding=1),
        nn.BatchNorm3d(out_ch, eps=config.bn_eps, momentum=config.bn_momentum),
        nn.ReLU(inplace=True),
        nn.Conv3d(out_ch, out_ch, 3, padding=1),
        nn.BatchNorm3d(out_ch, eps=config.bn_eps, momentum=config.bn_momentum),
        nn.ReLU(inplace=True),
    )


def up_block(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv3d(in_ch, out_ch, 3, padding=1))


class UNet3D(nn.Module):
    """Encoder-decoder with skip concatenation and a 1x1x1 head; output extent equals input extent."""

    def __init__(self, config: NetConfig = NetConfig()):
        super().__init__()
        self.config = config
        widths = [config.base_width * 2 ** i for i in range(config.stages + 1)]
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self.encoders = nn.ModuleList()
            in_ch = config.in_channels
            for width in widths[:-1]:
                self.encoders.append(conv_block(in_ch, width, config))
                in_ch = width
            self.pool = nn.MaxPool3d(2)
            self.bottleneck = conv_block(widths[-2], widths[-1], config)
            self.ups = nn.ModuleList()
            self.decoders = nn.ModuleList()
            for level in reversed(range(config.stages)):
                self.ups.append(up_block(widths[level + 1], widths[level]))
                self.decoders.append(conv_block(widths[level] * 2, widths[level], config))
            self.head = nn.Conv3d(widths[0], config.out_channels, 1)
            self.apply(_he_init)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        for encoder in self.encoders:
            x = encoder(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for up, decoder, skip in zip(self.ups, self.decoders, reversed(skips)):
            x = decoder(torch.cat([up(x), skip], dim=1))
        return self.head(x)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def _he_init(module: nn.Module) -> None:
    if isinstance(module, nn.Conv3d):
        nn.init.kaiming_normal_(module.weight, mode="fan_in", nonlinearity="relu")
        nn.init.zeros_(module.bias)


def check_input(config: NetConfig, inputs: torch.Tensor) -> None:
    if inputs.dim() != 5 or inputs.shape[1] != config.in_channels:
        raise ShapeMismatchError(f"expected input (N, {config.in_channels}, d, h, w), got {tuple(inputs.shape)}")
    if any(s % config.divisor for s in inputs.shape[2:]):
        raise ShapeMismatchError(f"input extent {tuple(inputs.shape[2:])} not divisible by {config.divisor}")


class Detector:
    """A net plus the output of its last forward pass, so a loss gradient can be pushed back through it."""

    def __init__(self, net: UNet3D):
        self.net = net
        self._output: Optional[torch.Tensor] = None

    @property
    def config(self) -> NetConfig:
        return self.net.config

    def forward(self, inputs: torch.Tensor) -> torch.Tensor:
        """Runs the net on (N, C, d, h, w) and caches the graph of the result."""
        check_input(self.config, inputs)
        self._output = self.net(inputs)
        return self._output

    def backward(self, loss_grad: torch.Tensor) -> Dict[str, torch.Tensor]:
        """Accumulates parameter gradients for d loss / d output = loss_grad.

        Raises
        ------
        BackwardBeforeForwardError
            No forward pass is cached
        """
        if self._output is None:
            raise BackwardBeforeForwardError("backward called before forward")
        if tuple(loss_grad.shape) != tuple(self._output.shape):
            raise ShapeMismatchError(f"loss gradient {tuple(loss_grad.shape)} does not match output "
                                     f"{tuple(self._output.shape)}")
        output, self._output = self._output, None
        output.backward(loss_grad.to(output.dtype))
        return {name: p.grad for name, p in self.net.named_parameters() if p.grad is not None}

    def zero_grad(self) -> None:
        self.net.zero_grad(set_to_none=False)


def kmse_torch(pred: torch.Tensor, gt: torch.Tensor, visibility: torch.Tensor) -> torch.Tensor:
    """Per sample KMSE of a batch (N, K, d, h, w) with visibility (N, K); returns shape (N,)."""
    if pred.shape != gt.shape or visibility.shape != pred.shape[:2]:
        raise ShapeMismatchError(f"shapes {tuple(pred.shape)}, {tuple(gt.shape)}, {tuple(visibility.shape)} differ")
    per_channel = ((pred - gt) ** 2).flatten(2).sum(dim=2)
    return (per_channel * visibility.to(pred.dtype)).sum(dim=1) / pred.shape[1]


def batch_kmse_gradient(pred: torch.Tensor, gt: torch.Tensor, visibility: torch.Tensor) -> torch.Tensor:
    """Gradient of the batch mean KMSE with respect to pred."""
    gate = visibility.to(pred.dtype)[:, :, None, None, None]
    return 2.0 / (pred.shape[0] * pred.shape[1]) * gate * (pred - gt)


def to_tensor(arrays: Sequence[np.ndarray], dtype: torch.dtype = torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.stack([np.asarray(a, dtype=np.float32) for a in arrays])).to(dtype)


def net_dtype(net: nn.Module) -> torch.dtype:
    return next(net.parameters()).dtype


def predict_heatmaps(net: UNet3D, inputs: List[np.ndarray]) -> List[HeatmapTensor]:
    """Inference mode forward of a batch of (C, d, h, w) crops; batch norm uses running statistics."""
    if not inputs:
        return []
    net.eval()
    batch = to_tensor(inputs, net_dtype(net))
    check_input(net.config, batch)
    with torch.no_grad():
        output = net(batch).to(torch.float64).numpy()
    return [HeatmapTensor(o) for o in output]
