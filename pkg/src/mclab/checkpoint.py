# -*- coding: utf-8 -*-

"""
Checkpoint files.

A checkpoint carries float32 parameters, the digest of the network
descriptor they belong to and a json provenance block describing
which centers trained the model, in which order and with what result.

Layout (little-endian)::

  magic "MCKP" | u32 version | digest[32] | u32 tensor count
  per tensor: u32 name length | name | u32 rank | u32 dims[rank] | f32 payload
  u32 provenance length | provenance json (utf-8)

"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

import mclab
from mclab.filesystem import FileError, atomic_write, path
from mclab.tinynet import NetworkDescriptor, ParamSet

log = logging.getLogger(__name__)


MAGIC = b"MCKP"
VERSION = 1

_U32 = struct.Struct("<I")


class CheckpointFormatError(FileError):
    pass


class ArchitectureMismatch(mclab.Error):
    exit_code = 5


@dataclass(frozen=True)
class ProvenanceEntry:
    """One trained epoch."""

    center: str
    strategy: str
    seed: int
    epoch: int


@dataclass(frozen=True)
class ValidationPoint:
    center: str
    epoch: int
    dice: float


@dataclass(frozen=True, eq=False)
class Checkpoint:
    """
    Trained parameters with their history.

    The optimizer state is not stored: Adam moments are reset at every
    hop between centers.

    """

    params: ParamSet
    descriptor: NetworkDescriptor
    provenance: tuple[ProvenanceEntry, ...] = ()
    best_val_dice: float = 0.0
    trajectory: tuple[ValidationPoint, ...] = field(default=())

    @property
    def centers(self) -> list[str]:
        """Centers in training order, without repetitions in a row."""
        res: list[str] = []
        for entry in self.provenance:
            if not res or res[-1] != entry.center:
                res.append(entry.center)
        return res

    def check(self, descriptor: NetworkDescriptor):
        """
        Ensure the parameters fit an architecture.

        Raises
        ------
        ArchitectureMismatch
            If the descriptor digests differ

        """
        if self.descriptor.digest() != descriptor.digest():
            raise ArchitectureMismatch(
                "checkpoint architecture differs from the configured network:"
                f" {self.descriptor.to_dict()} vs {descriptor.to_dict()}"
            )

    def meta(self) -> dict[str, Any]:
        return {
            "descriptor": self.descriptor.to_dict(),
            "provenance": [vars(entry) for entry in self.provenance],
            "best_val_dice": self.best_val_dice,
            "trajectory": [vars(point) for point in self.trajectory],
            "optimizer": "reset",
        }


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, _U32.pack(VERSION), ckpt.descriptor.digest()]
    parts.append(_U32.pack(len(ckpt.params)))

    for name, tensor in ckpt.params.items():
        encoded = name.encode()
        parts += [_U32.pack(len(encoded)), encoded, _U32.pack(tensor.values.ndim)]
        parts += [_U32.pack(n) for n in tensor.shape]
        parts.append(tensor.values.astype("<f4").tobytes())

    meta = json.dumps(ckpt.meta()).encode()
    parts += [_U32.pack(len(meta)), meta]

    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes, source: str):
        self.buf, self.pos, self.source = buf, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError(f"{self.source}: truncated checkpoint")

        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def decode_checkpoint(buf: bytes, source: str = "<bytes>") -> Checkpoint:
    """
    Parse a checkpoint.

    Raises
    ------
    CheckpointFormatError
        For malformed or inconsistent buffers

    """
    reader = _Reader(buf, source)

    if reader.take(4) != MAGIC:
        raise CheckpointFormatError(f"{source}: not a checkpoint file")

    version = reader.u32()
    if version != VERSION:
        raise CheckpointFormatError(f"{source}: unsupported version {version}")

    digest = reader.take(32)

    arrays = {}
    for _ in range(reader.u32()):
        raw = reader.take(reader.u32())
        try:
            name = raw.decode()
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(f"{source}: invalid tensor name {raw!r}") from exc

        shape = tuple(reader.u32() for _ in range(reader.u32()))
        size = int(np.prod(shape)) * 4
        arrays[name] = np.frombuffer(reader.take(size), dtype="<f4").reshape(shape)

    try:
        meta = json.loads(reader.take(reader.u32()).decode())
        descriptor = NetworkDescriptor.from_dict(meta["descriptor"])
        provenance = tuple(ProvenanceEntry(**e) for e in meta["provenance"])
        trajectory = tuple(ValidationPoint(**p) for p in meta["trajectory"])
        best = float(meta["best_val_dice"])
    except (KeyError, TypeError, ValueError, mclab.Error) as exc:
        raise CheckpointFormatError(f"{source}: invalid provenance: {exc}") from exc

    if reader.pos != len(buf):
        raise CheckpointFormatError(f"{source}: trailing bytes")

    if descriptor.digest() != digest:
        raise CheckpointFormatError(f"{source}: descriptor does not match its digest")

    return Checkpoint(
        params=ParamSet.from_arrays(arrays),
        descriptor=descriptor,
        provenance=provenance,
        best_val_dice=best,
        trajectory=trajectory,
    )


def write_checkpoint(ckpt: Checkpoint, target: str | Path) -> Path:
    """Write a checkpoint atomically."""
    with atomic_write(target) as fd:
        fd.write(encode_checkpoint(ckpt))

    log.info(f"checkpoint: wrote {target} ({len(ckpt.provenance)} epochs)")
    return Path(target)


def read_checkpoint(source: str | Path) -> Checkpoint:
    with path(source, is_file=True).open(mode="rb") as fd:
        return decode_checkpoint(fd.read(), source=str(source))
