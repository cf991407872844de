"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    offset 0   magic   b"PMTLCKPT"
    offset 8   u32     format version
    offset 12  u64     payload length N
    offset 20  N bytes msgpack-encoded :class:`Checkpoint`
    offset 20+N u32    CRC-32 of the payload

Tensors are stored as raw bytes with their numpy dtype string and shape, so a
save -> load -> save round trip reproduces the file byte for byte.
"""

import logging
import os
import struct
import zlib
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import msgspec
import numpy as np
import torch

from .exceptions import (
    CheckpointError,
    CheckpointIntegrityError,
    CheckpointVersionError,
)
from .model import PrototypeMTLNet
from .models import TaskSpec, TrainConfig

logger = logging.getLogger("protomtl.checkpoint")

MAGIC = b"PMTLCKPT"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIQ")
_TRAILER = struct.Struct("<I")


class TensorRecord(msgspec.Struct, array_like=True, frozen=True):
    """Raw tensor bytes with numpy dtype string (e.g. ``<f4``) and shape."""

    dtype: str
    shape: List[int]
    data: bytes


class Checkpoint(msgspec.Struct, kw_only=True):
    """Everything needed to rebuild a model or resume its training.

    Attributes
    ----------
    format_version : int
        Container format version
    config : TrainConfig
        Configuration the model was built and trained with
    tasks : list[TaskSpec]
        Task descriptors in id order
    image_size : list[int]
        Input resolution [H, W]
    epoch : int
        Completed epochs
    step : int
        Completed optimizer steps
    model_state : dict[str, TensorRecord]
        Every parameter and buffer of the model
    optimizer_state : dict[int, dict[str, TensorRecord]]
        Per-parameter optimizer state
    optimizer_groups : list[dict]
        Optimizer parameter groups
    rng_state : bytes
        State of the shuffling generator
    history : list[dict[str, float]] = []
        Per-epoch metrics log rows
    """

    format_version: int = FORMAT_VERSION
    config: TrainConfig
    tasks: List[TaskSpec]
    image_size: List[int]
    epoch: int
    step: int
    model_state: Dict[str, TensorRecord]
    optimizer_state: Dict[int, Dict[str, TensorRecord]] = {}
    optimizer_groups: List[Dict[str, Any]] = []
    rng_state: bytes = b""
    history: List[Dict[str, float]] = []


def tensor_to_record(tensor: torch.Tensor) -> TensorRecord:
    array = tensor.detach().cpu().contiguous().numpy()
    return TensorRecord(dtype=array.dtype.str, shape=list(array.shape), data=array.tobytes())


def record_to_tensor(record: TensorRecord) -> torch.Tensor:
    array = np.frombuffer(record.data, dtype=np.dtype(record.dtype))
    return torch.from_numpy(array.reshape(record.shape).copy())


def capture(
    model: torch.nn.Module,
    config: TrainConfig,
    tasks: List[TaskSpec],
    image_size: List[int],
    epoch: int = 0,
    step: int = 0,
    optimizer: Optional[torch.optim.Optimizer] = None,
    generator: Optional[torch.Generator] = None,
    history: Optional[List[Dict[str, float]]] = None,
) -> Checkpoint:
    """Snapshot model, optimizer and generator state into a :class:`Checkpoint`."""
    optimizer_state: Dict[int, Dict[str, TensorRecord]] = {}
    optimizer_groups: List[Dict[str, Any]] = []
    if optimizer is not None:
        state = optimizer.state_dict()
        for index, values in state["state"].items():
            optimizer_state[int(index)] = {
                key: tensor_to_record(torch.as_tensor(value))
                for key, value in values.items()
            }
        optimizer_groups = msgspec.to_builtins(state["param_groups"])

    rng_state = b""
    if generator is not None:
        rng_state = generator.get_state().numpy().tobytes()

    return Checkpoint(
        config=config,
        tasks=list(tasks),
        image_size=list(image_size),
        epoch=epoch,
        step=step,
        model_state={
            name: tensor_to_record(tensor) for name, tensor in model.state_dict().items()
        },
        optimizer_state=optimizer_state,
        optimizer_groups=optimizer_groups,
        rng_state=rng_state,
        history=list(history or []),
    )


def restore(
    checkpoint: Checkpoint,
    model: torch.nn.Module,
    optimizer: Optional[torch.optim.Optimizer] = None,
    generator: Optional[torch.Generator] = None,
) -> None:
    """Load checkpoint state into live objects."""
    model.load_state_dict(
        {name: record_to_tensor(r) for name, r in checkpoint.model_state.items()}
    )
    if optimizer is not None and checkpoint.optimizer_groups:
        optimizer.load_state_dict(
            {
                "state": {
                    index: {key: record_to_tensor(r) for key, r in values.items()}
                    for index, values in checkpoint.optimizer_state.items()
                },
                "param_groups": checkpoint.optimizer_groups,
            }
        )
    if generator is not None and checkpoint.rng_state:
        state = np.frombuffer(checkpoint.rng_state, dtype=np.uint8).copy()
        generator.set_state(torch.from_numpy(state))


def build_model(checkpoint: Checkpoint) -> PrototypeMTLNet:
    """Rebuild the network described by a checkpoint with its weights loaded."""
    model = PrototypeMTLNet(
        checkpoint.config, checkpoint.tasks, tuple(checkpoint.image_size)
    )
    restore(checkpoint, model)
    return model


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    payload = msgspec.msgpack.encode(checkpoint)
    header = _HEADER.pack(MAGIC, checkpoint.format_version, len(payload))
    return header + payload + _TRAILER.pack(zlib.crc32(payload))


def decode_checkpoint(data: bytes) -> Checkpoint:
    """Parse a checkpoint container.

    Raises
    ------
    CheckpointIntegrityError
        If the data is truncated, has a bad magic, a CRC mismatch or an
        undecodable payload
    CheckpointVersionError
        If the format version is unknown
    """
    if len(data) < _HEADER.size:
        raise CheckpointIntegrityError(len(data), "truncated header")
    magic, version, length = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointIntegrityError(0, "not a protomtl checkpoint")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(version)

    end = _HEADER.size + length
    if len(data) < end + _TRAILER.size:
        raise CheckpointIntegrityError(
            len(data), f"truncated payload, expected {end + _TRAILER.size} bytes"
        )
    if len(data) > end + _TRAILER.size:
        raise CheckpointIntegrityError(end + _TRAILER.size, "trailing bytes")
    payload = data[_HEADER.size : end]
    (crc,) = _TRAILER.unpack_from(data, end)
    if crc != zlib.crc32(payload):
        raise CheckpointIntegrityError(end, "checksum mismatch")

    try:
        checkpoint = msgspec.msgpack.decode(payload, type=Checkpoint)
    except msgspec.DecodeError as e:
        raise CheckpointIntegrityError(_HEADER.size, f"undecodable payload: {e}") from e
    if checkpoint.format_version != version:
        raise CheckpointIntegrityError(_HEADER.size, "payload version disagrees with header")
    return checkpoint


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> Path:
    """Write a checkpoint atomically (temporary file, then rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_bytes(encode_checkpoint(checkpoint))
        os.replace(tmp, path)
    except OSError as e:
        raise CheckpointError(f"Cannot write checkpoint {path}: {e}") from e
    logger.info(f"Saved checkpoint at epoch {checkpoint.epoch} to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """Read and verify a checkpoint file."""
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
    return decode_checkpoint(data)
