"""
ampost - Binary Container

The AMP1 container shared by datasets, measurement sets and checkpoints:

    magic "AMP1"
    u32  tensor count
    per tensor:
        u16  name length, name bytes (utf-8)
        u8   rank
        u64  dims[rank]
        f64  payload, little-endian, row-major

Round-trips are bit-exact.
"""

import logging
import struct
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np

from .errors import ContainerError

logger = logging.getLogger(__name__)

MAGIC = b"AMP1"
_F64 = np.dtype("<f8")

PathLike = Union[str, Path]


def encode_container(tensors: Mapping[str, np.ndarray]) -> bytes:
    """
    Serialize named arrays into AMP1 bytes.

    Args:
        tensors: Ordered mapping of name to array; order is preserved

    Returns:
        The encoded container.
    """
    chunks = [MAGIC, struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise ContainerError(f"tensor name too long: {name[:40]}...")
        arr = np.asarray(value, dtype=_F64)
        if arr.ndim > 0xFF:
            raise ContainerError(f"rank {arr.ndim} of '{name}' exceeds 255")
        chunks.append(struct.pack("<H", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes(order="C"))
    return b"".join(chunks)


def decode_container(blob: bytes) -> Dict[str, np.ndarray]:
    """
    Parse AMP1 bytes into named arrays.

    Raises:
        ContainerError: On bad magic, truncated payload or dims that overflow the buffer.
    """
    if blob[:4] != MAGIC:
        raise ContainerError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    view = memoryview(blob)
    offset = 4

    def take(n: int) -> memoryview:
        nonlocal offset
        if offset + n > len(view):
            raise ContainerError(f"truncated container at byte {offset} (need {n} more)")
        chunk = view[offset:offset + n]
        offset += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        n_items = 1
        for dim in dims:
            n_items *= dim
            # bound before multiplying further so huge dims cannot overflow
            if n_items * _F64.itemsize > len(view) - offset:
                raise ContainerError(f"dims {dims} of '{name}' overflow the remaining payload")
        payload = take(n_items * _F64.itemsize)
        tensors[name] = np.frombuffer(payload, dtype=_F64).reshape(dims).copy()
    if offset != len(view):
        logger.warning("ignoring %d trailing bytes in container", len(view) - offset)
    return tensors


def write_container(path: PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    """Write named arrays to ``path`` in AMP1 format."""
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_container(tensors))
    logger.debug("wrote %d tensors to %s", len(tensors), path)


def read_container(path: PathLike) -> Dict[str, np.ndarray]:
    """Read an AMP1 file into an ordered name -> array mapping."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"container {path} not found")
    return decode_container(path.read_bytes())
