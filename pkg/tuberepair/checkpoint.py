"""Checkpoint files: named float32 tensors of a detector and its optimizer.

Layout, little endian::

    "PTRC" | u32 version | u32 tensor count
    per tensor: u16 name length | UTF-8 name | u8 rank | u32 dims[rank] | f32 payload
    u64 byte length of the tensor region
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from tuberepair.errors import (CheckpointFormatError, CheckpointTruncatedError, IncompatibleCheckpointError,
                               TensorCountMismatchError)
from tuberepair.network import NetConfig, UNet3D
from tuberepair.util import PathLike, atomic_write_bytes

logger = logging.getLogger(__name__)

MAGIC = b"PTRC"
VERSION = 1
HEADER = struct.Struct("<4sII")
TRAILER = struct.Struct("<Q")
NET_PREFIX = "net."
OPTIM_PREFIX = "optim."
META_NET = "meta.net"


def encode_checkpoint(tensors: Dict[str, np.ndarray]) -> bytes:
    region = bytearray()
    for name, value in tensors.items():
        encoded = name.encode("utf-8")
        array = np.ascontiguousarray(value, dtype="<f4")
        region += struct.pack("<H", len(encoded)) + encoded
        region += struct.pack(f"<B{array.ndim}I", array.ndim, *array.shape)
        region += array.tobytes()
    return HEADER.pack(MAGIC, VERSION, len(tensors)) + bytes(region) + TRAILER.pack(len(region))


class _Reader:

    def __init__(self, raw: bytes, start: int, stop: int):
        self.raw, self.offset, self.stop = raw, start, stop

    def take(self, size: int) -> bytes:
        if self.offset + size > self.stop:
            raise EOFError
        chunk = self.raw[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(raw: bytes) -> Dict[str, np.ndarray]:
    """Parses checkpoint bytes into name -> float32 array, in file order.

    Raises
    ------
    CheckpointFormatError
        Wrong magic or version
    CheckpointTruncatedError
        "unexpected end of checkpoint"
    TensorCountMismatchError
        The tensor region holds more or fewer tensors than the header declares
    """
    if len(raw) < HEADER.size:
        raise CheckpointTruncatedError("unexpected end of checkpoint")
    magic, version, count = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad checkpoint magic {magic!r}")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    if len(raw) < HEADER.size + TRAILER.size:
        raise CheckpointTruncatedError("unexpected end of checkpoint")
    region_end = len(raw) - TRAILER.size
    (declared,) = TRAILER.unpack_from(raw, region_end)
    if declared != region_end - HEADER.size:
        raise CheckpointTruncatedError("unexpected end of checkpoint")
    reader = _Reader(raw, HEADER.size, region_end)
    tensors: Dict[str, np.ndarray] = {}
    try:
        while reader.offset < region_end:
            (name_length,) = reader.unpack("<H")
            name = reader.take(name_length).decode("utf-8")
            (rank,) = reader.unpack("<B")
            shape = reader.unpack(f"<{rank}I")
            size = int(np.prod(shape, dtype=np.int64))
            tensors[name] = np.frombuffer(reader.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    except EOFError:
        raise CheckpointTruncatedError("unexpected end of checkpoint") from None
    except UnicodeDecodeError as exc:
        raise CheckpointFormatError(f"tensor name is not UTF-8: {exc}") from exc
    if len(tensors) != count:
        raise TensorCountMismatchError(f"header declares {count} tensors, found {len(tensors)}")
    return tensors


def _config_vector(config: NetConfig) -> np.ndarray:
    return np.array([config.in_channels, config.out_channels, config.base_width, config.stages, config.bn_eps,
                     config.bn_momentum], dtype=np.float32)


def _config_from_vector(vector: np.ndarray) -> NetConfig:
    if vector.shape != (6,):
        raise CheckpointFormatError(f"{META_NET} must hold 6 values, got shape {vector.shape}")
    in_ch, out_ch, width, stages, eps, momentum = (float(v) for v in vector)
    return NetConfig(int(in_ch), int(out_ch), int(width), int(stages), float(f"{eps:.7g}"), float(f"{momentum:.7g}"))


@dataclass(frozen=True)
class Checkpoint:
    tensors: Dict[str, np.ndarray]

    def net_config(self, seed: int = 0) -> NetConfig:
        if META_NET not in self.tensors:
            raise CheckpointFormatError(f"checkpoint lacks {META_NET}")
        config = _config_from_vector(self.tensors[META_NET])
        return NetConfig(config.in_channels, config.out_channels, config.base_width, config.stages, config.bn_eps,
                         config.bn_momentum, seed)

    def names(self, prefix: str) -> List[str]:
        return [name for name in self.tensors if name.startswith(prefix)]

    def build_net(self) -> UNet3D:
        net = UNet3D(self.net_config())
        load_net_state(net, self)
        return net


def checkpoint_tensors(net: UNet3D, optimizer: Optional[torch.optim.Optimizer] = None) -> Dict[str, np.ndarray]:
    tensors: Dict[str, np.ndarray] = {}
    for name, value in net.state_dict().items():
        tensors[NET_PREFIX + name] = value.detach().cpu().to(torch.float64).numpy()
    if optimizer is not None:
        names = {id(p): name for name, p in net.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                state = optimizer.state.get(p)
                if not state:
                    continue
                base = OPTIM_PREFIX + names[id(p)]
                tensors[f"{base}.exp_avg"] = state["exp_avg"].detach().cpu().to(torch.float64).numpy()
                tensors[f"{base}.exp_avg_sq"] = state["exp_avg_sq"].detach().cpu().to(torch.float64).numpy()
                tensors[f"{base}.step"] = np.array([state["step"]], dtype=np.float64)
    tensors[META_NET] = _config_vector(net.config)
    return tensors


def save_checkpoint(net: UNet3D, path: PathLike, optimizer: Optional[torch.optim.Optimizer] = None) -> None:
    raw = encode_checkpoint(checkpoint_tensors(net, optimizer))
    atomic_write_bytes(path, raw)
    logger.info("checkpoint %s: %d bytes", path, len(raw))


def load_checkpoint(path: PathLike) -> Checkpoint:
    with open(path, "rb") as handle:
        return Checkpoint(decode_checkpoint(handle.read()))


def load_net_state(net: UNet3D, checkpoint: Checkpoint) -> None:
    """Copies every network tensor by name.

    Raises
    ------
    IncompatibleCheckpointError
        Lists tensors that are missing, unexpected or differently shaped
    """
    state = net.state_dict()
    stored = {name[len(NET_PREFIX):]: value for name, value in checkpoint.tensors.items()
              if name.startswith(NET_PREFIX)}
    bad = [name for name in state if name not in stored or tuple(stored[name].shape) != tuple(state[name].shape)]
    bad += [name for name in stored if name not in state]
    if bad:
        raise IncompatibleCheckpointError(NET_PREFIX + name for name in bad)
    net.load_state_dict({name: torch.from_numpy(np.asarray(stored[name])).to(state[name].dtype) for name in state})


def load_optimizer_state(optimizer: torch.optim.Optimizer, net: UNet3D, checkpoint: Checkpoint) -> None:
    """Restores moment buffers and step counts of the parameters the checkpoint has them for."""
    for name, p in net.named_parameters():
        base = OPTIM_PREFIX + name
        if f"{base}.exp_avg" not in checkpoint.tensors:
            continue
        optimizer.state[p] = {
            "step": int(checkpoint.tensors[f"{base}.step"][0]),
            "exp_avg": torch.from_numpy(np.array(checkpoint.tensors[f"{base}.exp_avg"])).to(p.dtype),
            "exp_avg_sq": torch.from_numpy(np.array(checkpoint.tensors[f"{base}.exp_avg_sq"])).to(p.dtype),
        }
