"""
Binary container for model checkpoints and latent files.

Layout (all integers little-endian)::

    "MOUS"                  4 bytes magic
    version                 u32 (1)
    kind                    u32 (1 stage1, 2 stage2, 3 latent)
    blob length + blob      u64 + UTF-8 YAML (config, step, rng state, extras)
    tensor count            u64
    per tensor              u16 name length, name, u8 rank, u64 dims, float32 payload
    crc                     u64 CRC-64/XZ of every preceding byte

Loading walks the whole structure with bounds checks before any payload is
materialized, so a truncated file never yields a partial model.
"""

import io
import logging
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Any, BinaryIO, Dict, Mapping, Optional, Tuple, Union

import crcmod
import numpy as np
import yaml

from .errors import CheckpointError, ShapeError, TruncatedCheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"MOUS"
VERSION = 1

_CRC_BLOCK = 1 << 24

# CRC-64/XZ: ECMA-182 polynomial, reflected, all-ones register and final xor
_crc64_xz = crcmod.mkCrcFun(0x142F0E1EBA9EA3693, initCrc=0, rev=True, xorOut=0xFFFFFFFFFFFFFFFF)
if not getattr(crcmod, "_usingExtension", False):
    logger.warning("crcmod C extension unavailable; checkpoint checksums will be slow")


def crc64(data: Union[bytes, bytearray, memoryview], crc: int = 0) -> int:
    """CRC-64/XZ; pass a previous result as ``crc`` to continue a running checksum."""
    view = memoryview(data).cast("B")
    for start in range(0, len(view), _CRC_BLOCK):
        crc = _crc64_xz(bytes(view[start : start + _CRC_BLOCK]), crc)
    return crc


class Kind(IntEnum):
    STAGE1 = 1
    STAGE2 = 2
    LATENT = 3


@dataclass
class Checkpoint:
    kind: Kind
    meta: Dict[str, Any] = field(default_factory=dict)
    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    version: int = VERSION

    def subset(self, prefix: str) -> "OrderedDict[str, np.ndarray]":
        """Tensors under ``prefix``, with the prefix stripped from their names."""
        return OrderedDict((n[len(prefix) :], t) for n, t in self.tensors.items() if n.startswith(prefix))


def write_to(ckpt: Checkpoint, stream: BinaryIO) -> int:
    """
    Serialize ``ckpt`` into ``stream`` piece by piece, checksumming as it goes.

    Only one tensor payload is held beyond the caller's arrays at a time.
    Returns the CRC-64 written as the trailer.
    """
    crc = 0

    def emit(piece: Union[bytes, memoryview]) -> None:
        nonlocal crc
        stream.write(piece)
        crc = crc64(piece, crc)

    blob = yaml.safe_dump(ckpt.meta, sort_keys=True).encode("utf-8")
    emit(MAGIC + struct.pack("<IIQ", ckpt.version, int(ckpt.kind), len(blob)))
    emit(blob)
    emit(struct.pack("<Q", len(ckpt.tensors)))
    for name, value in ckpt.tensors.items():
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        array = np.ascontiguousarray(value, dtype="<f4")
        if array.ndim > 0xFF:
            raise ShapeError(f"tensor '{name}' has rank {array.ndim}")
        emit(
            struct.pack("<H", len(encoded))
            + encoded
            + struct.pack("<B", array.ndim)
            + struct.pack(f"<{array.ndim}Q", *array.shape)
        )
        emit(memoryview(array.reshape(-1).view(np.uint8)))
    stream.write(struct.pack("<Q", crc))
    return crc


def dumps(ckpt: Checkpoint) -> bytes:
    buffer = io.BytesIO()
    write_to(ckpt, buffer)
    return buffer.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(
                f"file truncated while reading {what} at byte {self.pos} "
                f"(need {n}, have {len(self.data) - self.pos})"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def skip(self, n: int, what: str) -> int:
        """Advance past ``n`` bytes without copying them; returns the start offset."""
        start = self.pos
        if start + n > len(self.data):
            self.take(n, what)
        self.pos += n
        return start

    def unpack(self, fmt: str, what: str) -> Tuple[int, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


class CheckpointFile:
    """
    A validated checkpoint image: header, metadata and tensor table.

    Payloads stay in the raw buffer until :meth:`tensors` is called, so
    callers can compare the shape table against a model first.
    """

    def __init__(self, data: bytes, source: str = "<bytes>"):
        self.source = source
        reader = _Reader(data)
        magic = reader.take(len(MAGIC), "magic")
        if magic != MAGIC:
            raise CheckpointError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
        self.version, kind = reader.unpack("<II", "header")
        if self.version != VERSION:
            raise CheckpointError(f"{source}: unsupported version {self.version} (this build reads {VERSION})")
        try:
            self.kind = Kind(kind)
        except ValueError:
            raise CheckpointError(f"{source}: unknown kind tag {kind}") from None

        (blob_length,) = reader.unpack("<Q", "metadata length")
        blob = reader.take(blob_length, "metadata")
        (count,) = reader.unpack("<Q", "tensor count")

        self.table: "OrderedDict[str, Tuple[Tuple[int, ...], int]]" = OrderedDict()
        for index in range(count):
            (name_length,) = reader.unpack("<H", f"tensor {index} name length")
            name = reader.take(name_length, f"tensor {index} name").decode("utf-8", errors="replace")
            (rank,) = reader.unpack("<B", f"tensor '{name}' rank")
            shape = reader.unpack(f"<{rank}Q", f"tensor '{name}' dims")
            offset = reader.skip(4 * int(np.prod(shape, dtype=np.int64)), f"tensor '{name}' payload")
            if name in self.table:
                raise CheckpointError(f"{source}: duplicate tensor name '{name}'")
            self.table[name] = (tuple(int(d) for d in shape), offset)

        body_end = reader.pos
        (stored,) = reader.unpack("<Q", "checksum")
        if reader.pos != len(data):
            raise CheckpointError(f"{source}: {len(data) - reader.pos} trailing bytes after checksum")
        if crc64(memoryview(data)[:body_end]) != stored:
            raise CheckpointError(f"{source}: checksum mismatch")

        try:
            meta = yaml.safe_load(blob.decode("utf-8")) or {}
        except (UnicodeDecodeError, yaml.YAMLError) as e:
            raise CheckpointError(f"{source}: unreadable metadata: {e}") from e
        if not isinstance(meta, dict):
            raise CheckpointError(f"{source}: metadata must be a mapping")
        self.meta: Dict[str, Any] = meta
        self._data = data

    def check_shapes(self, expected: Mapping[str, Tuple[int, ...]], prefix: str = "") -> None:
        """Every name in ``expected`` exists under ``prefix`` with exactly that shape."""
        problems = []
        for name, shape in expected.items():
            entry = self.table.get(prefix + name)
            if entry is None:
                problems.append(f"missing '{prefix}{name}'")
            elif entry[0] != tuple(shape):
                problems.append(f"'{prefix}{name}' is {entry[0]}, expected {tuple(shape)}")
        if problems:
            raise ShapeError(f"{self.source}: " + "; ".join(problems[:5]))

    def tensors(self) -> "OrderedDict[str, np.ndarray]":
        out: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, (shape, offset) in self.table.items():
            count = int(np.prod(shape, dtype=np.int64))
            out[name] = np.frombuffer(self._data, dtype="<f4", count=count, offset=offset).reshape(shape).copy()
        return out

    def to_checkpoint(self) -> Checkpoint:
        return Checkpoint(self.kind, self.meta, self.tensors(), self.version)

    @property
    def scalar_count(self) -> int:
        return sum(int(np.prod(shape, dtype=np.int64)) for shape, _ in self.table.values())


def open_checkpoint(path: Union[str, Path], kind: Optional[Kind] = None) -> CheckpointFile:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read '{path}': {e.strerror or e}") from e
    ckpt = CheckpointFile(data, str(path))
    if kind is not None and ckpt.kind != kind:
        raise CheckpointError(f"{path}: expected a {kind.name.lower()} file, found {ckpt.kind.name.lower()}")
    return ckpt


def save(ckpt: Checkpoint, path: Union[str, Path]) -> Path:
    """Write atomically (temporary file, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as stream:
            write_to(ckpt, stream)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise
    os.replace(tmp, path)
    logger.info("saved %s checkpoint %s (%d tensors)", ckpt.kind.name.lower(), path, len(ckpt.tensors))
    return path


def stored_checksum(path: Union[str, Path]) -> int:
    """The CRC-64 trailer of a container file, read without loading the file."""
    path = Path(path)
    try:
        with open(path, "rb") as stream:
            stream.seek(0, os.SEEK_END)
            if stream.tell() < len(MAGIC) + 8:
                raise TruncatedCheckpointError(f"{path}: too short to hold a checksum")
            stream.seek(-8, os.SEEK_END)
            (crc,) = struct.unpack("<Q", stream.read(8))
    except OSError as e:
        raise CheckpointError(f"cannot read '{path}': {e.strerror or e}") from e
    return crc


def load(path: Union[str, Path], kind: Optional[Kind] = None) -> Checkpoint:
    ckpt = open_checkpoint(path, kind).to_checkpoint()
    logger.info("loaded %s checkpoint %s", ckpt.kind.name.lower(), path)
    return ckpt
