"""
Binary checkpoint format (all integers little-endian):

    "FFPF" | version u32 | tensor count u32
    per tensor: name length u16, UTF-8 name, rank u8, dims u64 x rank, float32 payload
    CRC32 u32 over everything between the header and the trailer

Model tensors are stored under ``model.<name>``, momentum buffers under
``optim.momentum.<name>``; the epoch counter and a JSON echo of the model
config ride along as ``meta.epoch`` and ``meta.config``.
"""

import json
import logging
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from ffpf.exceptions import (
    BadMagicError,
    CheckpointConfigMismatchError,
    CheckpointError,
    ChecksumMismatchError,
    NameCollisionError,
    TruncatedCheckpointError,
    VersionMismatchError,
)
from ffpf.layers import Module
from ffpf.models import ModelConfig

logger = logging.getLogger(__name__)

MAGIC = b"FFPF"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sII")
_TRAILER = struct.Struct("<I")

MODEL_PREFIX = "model."
MOMENTUM_PREFIX = "optim.momentum."
META_EPOCH = "meta.epoch"
META_CONFIG = "meta.config"


@dataclass
class Checkpoint:
    config: ModelConfig
    epoch: int = 0
    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    momentum: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    @classmethod
    def from_model(
        cls,
        model: Module,
        config: ModelConfig,
        epoch: int,
        momentum: dict[str, np.ndarray] | None = None,
    ) -> "Checkpoint":
        buffers = OrderedDict(
            (k, np.asarray(v, dtype=np.float32).copy()) for k, v in (momentum or {}).items()
        )
        return cls(config=config, epoch=epoch, tensors=model.state_dict(), momentum=buffers)

    def apply(self, model: Module) -> None:
        model.load_state_dict(self.tensors)

    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        config_bytes = np.frombuffer(self.config.model_dump_json().encode(), dtype=np.uint8)
        pairs = [(MODEL_PREFIX + k, v) for k, v in self.tensors.items()]
        pairs += [(MOMENTUM_PREFIX + k, v) for k, v in self.momentum.items()]
        pairs.append((META_EPOCH, np.array(self.epoch, dtype=np.float32)))
        pairs.append((META_CONFIG, config_bytes.astype(np.float32)))
        return pairs

    @classmethod
    def from_named_tensors(cls, pairs: Iterable[tuple[str, np.ndarray]]) -> "Checkpoint":
        tensors: OrderedDict[str, np.ndarray] = OrderedDict()
        momentum: OrderedDict[str, np.ndarray] = OrderedDict()
        epoch: int | None = None
        config: ModelConfig | None = None
        for name, value in pairs:
            if name.startswith(MODEL_PREFIX):
                tensors[name[len(MODEL_PREFIX) :]] = value
            elif name.startswith(MOMENTUM_PREFIX):
                momentum[name[len(MOMENTUM_PREFIX) :]] = value
            elif name == META_EPOCH:
                epoch = int(value.reshape(-1)[0])
            elif name == META_CONFIG:
                raw = value.astype(np.uint8).tobytes()
                try:
                    config = ModelConfig.model_validate_json(raw)
                except ValueError as e:
                    raise CheckpointConfigMismatchError(f"stored config is invalid: {e}") from e
            else:
                raise CheckpointError(f"unknown tensor {name!r} in checkpoint")
        if epoch is None or config is None:
            raise CheckpointError("checkpoint is missing its epoch or config record")
        return cls(config=config, epoch=epoch, tensors=tensors, momentum=momentum)


def encode_tensors(pairs: Iterable[tuple[str, np.ndarray]]) -> bytes:
    body = bytearray()
    seen: set[str] = set()
    count = 0
    for name, value in pairs:
        if name in seen:
            raise NameCollisionError(f"tensor name {name!r} appears twice")
        seen.add(name)
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        array = np.ascontiguousarray(value, dtype="<f4")
        if array.ndim > 0xFF:
            raise CheckpointError(f"{name}: rank {array.ndim} cannot be stored")
        body += struct.pack("<H", len(encoded)) + encoded
        body += struct.pack(f"<B{array.ndim}Q", array.ndim, *array.shape)
        body += array.tobytes()
        count += 1
    checksum = zlib.crc32(bytes(body))
    return _HEADER.pack(MAGIC, FORMAT_VERSION, count) + bytes(body) + _TRAILER.pack(checksum)


class _Reader:
    def __init__(self, data: bytes, start: int, end: int) -> None:
        self.data = data
        self.pos = start
        self.end = end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise TruncatedCheckpointError(
                f"checkpoint ends at byte {self.end}, record needs {self.pos + n}"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_tensors(data: bytes) -> list[tuple[str, np.ndarray]]:
    if len(data) < len(MAGIC) or data[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"not an FFPF checkpoint (magic {data[:4]!r})")
    if len(data) < _HEADER.size:
        raise TruncatedCheckpointError("checkpoint header is incomplete")
    _, version, count = _HEADER.unpack_from(data)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"checkpoint format version {version}, this build reads {FORMAT_VERSION}"
        )

    # Records may not run into the trailer.
    end = len(data) - _TRAILER.size
    if end < _HEADER.size:
        raise TruncatedCheckpointError("checkpoint has no checksum trailer")
    reader = _Reader(data, _HEADER.size, end)
    pairs: list[tuple[str, np.ndarray]] = []
    seen: set[str] = set()
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        try:
            name = reader.take(name_len).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"tensor name is not UTF-8: {e}") from e
        if name in seen:
            raise NameCollisionError(f"tensor name {name!r} appears twice in the file")
        seen.add(name)
        (rank,) = reader.unpack("<B")
        dims = reader.unpack(f"<{rank}Q")
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = reader.take(4 * size)
        pairs.append((name, np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)))
    if reader.pos != end:
        raise CheckpointError(f"{end - reader.pos} unexpected bytes after the last tensor")

    (stored,) = _TRAILER.unpack_from(data, end)
    actual = zlib.crc32(data[_HEADER.size : end])
    if stored != actual:
        raise ChecksumMismatchError(f"CRC32 mismatch: stored {stored:#010x}, computed {actual:#010x}")
    return pairs


def save_checkpoint(path: Path, checkpoint: Checkpoint) -> None:
    """Write ``checkpoint`` as a single self-describing binary file.

    Args:
        path: Destination file. Missing parent directories are created.
        checkpoint: Weights, running statistics, momentum buffers, epoch and
            model config to store.

    Raises:
        CheckpointError: The file could not be written.
        NameCollisionError: Two tensors share a name.
    """
    blob = encode_tensors(checkpoint.named_tensors())
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(blob)
    except OSError as e:
        raise CheckpointError(f"cannot write {path}: {e}") from e
    logger.info("saved checkpoint (epoch %d, %d bytes) to %s", checkpoint.epoch, len(blob), path)


def load_checkpoint(path: Path, config: ModelConfig | None = None) -> Checkpoint:
    """Read and verify a checkpoint written by ``save_checkpoint``.

    Args:
        path: File to read.
        config: When given, the stored config must equal it.

    Returns:
        The decoded checkpoint, with its momentum buffers if any were saved.

    Raises:
        CheckpointError: The file is unreadable or lacks its epoch or config
            record. The subclasses name the precise fault (bad magic, version
            mismatch, truncation, checksum mismatch).
        CheckpointConfigMismatchError: ``config`` differs from the stored one.
    """
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e}") from e
    checkpoint = Checkpoint.from_named_tensors(decode_tensors(data))
    if config is not None and config != checkpoint.config:
        raise CheckpointConfigMismatchError(
            f"{path} was saved for a different model configuration"
        )
    logger.info("loaded checkpoint (epoch %d) from %s", checkpoint.epoch, path)
    return checkpoint
