"""Reader and writer for the IDX container used by MNIST."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .bags import InstanceStore

UBYTE = 0x08


class IdxFormatError(ValueError):
    pass


@dataclass(frozen=True)
class IdxHeader:
    magic: int
    dtype_code: int
    ndim: int
    dims: tuple[int, ...]

    @property
    def size(self) -> int:
        return 4 + 4 * self.ndim


@dataclass(frozen=True, eq=False)
class RawTensor:
    dims: tuple[int, ...]
    data: np.ndarray  # flat uint8, row-major

    def __post_init__(self):
        if self.data.size != int(np.prod(self.dims, dtype=np.int64)):
            raise IdxFormatError("payload length does not match dims")

    def array(self) -> np.ndarray:
        return self.data.reshape(self.dims)


def parse_header(buf: bytes) -> IdxHeader:
    if len(buf) < 4:
        raise IdxFormatError("stream shorter than the 4-byte magic")
    (magic,) = struct.unpack(">I", buf[:4])
    if buf[0] != 0 or buf[1] != 0:
        raise IdxFormatError(f"bad magic 0x{magic:08x}: leading bytes must be zero")
    dtype_code, ndim = buf[2], buf[3]
    if dtype_code != UBYTE:
        raise IdxFormatError(f"unsupported dtype code 0x{dtype_code:02x}")
    if ndim == 0:
        raise IdxFormatError("ndim must be >= 1")
    if len(buf) < 4 + 4 * ndim:
        raise IdxFormatError("stream truncated inside dimension list")
    dims = struct.unpack(f">{ndim}I", buf[4 : 4 + 4 * ndim])
    return IdxHeader(magic, dtype_code, ndim, tuple(dims))


def parse_idx(buf: bytes) -> RawTensor:
    header = parse_header(buf)
    n = int(np.prod(header.dims, dtype=np.int64))
    payload = buf[header.size :]
    if len(payload) < n:
        raise IdxFormatError(f"payload truncated: header promises {n} bytes, found {len(payload)}")
    if len(payload) > n:
        raise IdxFormatError(f"{len(payload) - n} trailing bytes after payload")
    return RawTensor(header.dims, np.frombuffer(payload, dtype=np.uint8))


def serialize_idx(raw: RawTensor) -> bytes:
    head = struct.pack(">BBBB", 0, 0, UBYTE, len(raw.dims))
    head += struct.pack(f">{len(raw.dims)}I", *raw.dims)
    return head + np.ascontiguousarray(raw.data, dtype=np.uint8).tobytes()


def read_idx(path: Union[str, Path]) -> RawTensor:
    return parse_idx(Path(path).read_bytes())


def write_idx(path: Union[str, Path], array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    Path(path).write_bytes(serialize_idx(RawTensor(tuple(array.shape), array.ravel())))


def normalize(raw: RawTensor) -> np.ndarray:
    """Scale bytes to [0, 1], one flattened row per leading-dimension slice."""
    n = raw.dims[0]
    return (raw.data.reshape(n, -1).astype(np.float32) / np.float32(255.0))


def load_split(image_path: Union[str, Path], label_path: Union[str, Path]) -> InstanceStore:
    images = read_idx(image_path)
    labels = read_idx(label_path)
    if len(labels.dims) != 1:
        raise IdxFormatError(f"{label_path}: label file must be 1-d, got {len(labels.dims)} dims")
    if images.dims[0] != labels.dims[0]:
        raise IdxFormatError(
            f"count mismatch: {images.dims[0]} images vs {labels.dims[0]} labels"
        )
    return InstanceStore(normalize(images), labels.data.astype(np.int64))


def find_mnist(root: Union[str, Path], split: str = "train") -> tuple[Path, Path]:
    prefix = "train" if split == "train" else "t10k"
    root = Path(root)
    return root / f"{prefix}-images-idx3-ubyte", root / f"{prefix}-labels-idx1-ubyte"
