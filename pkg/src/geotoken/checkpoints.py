"""Binary tensor checkpoints shared by every trainable stage.

Layout (little-endian throughout): 4-byte magic, u32 version, then one record
per tensor until EOF — u16 name length, name bytes (utf-8), u8 rank, u32 per
dimension, then the f32 payload in C order.
"""

from __future__ import annotations

import pathlib
import struct

import numpy as np

from .errors import DataFormatError

ALIGN_MAGIC = b"GTAL"
SEQMODEL_MAGIC = b"GTSM"
REWARD_MAGIC = b"GTRM"
CHECKPOINT_VERSION = 1


def save_tensors(path, magic: bytes, named: dict[str, np.ndarray],
                 version: int = CHECKPOINT_VERSION) -> None:
    """Write named f32 tensors; iteration order is the sorted name order."""
    if len(magic) != 4:
        raise DataFormatError(f"magic must be 4 bytes, got {magic!r}")
    path = pathlib.Path(path)
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<I", version))
        for name in sorted(named):
            arr = np.ascontiguousarray(named[name], dtype="<f4")
            enc = name.encode("utf-8")
            f.write(struct.pack("<H", len(enc)))
            f.write(enc)
            f.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.tobytes(order="C"))


def load_tensors(path, magic: bytes) -> tuple[int, dict[str, np.ndarray]]:
    """Read all tensor records back; returns (version, {name: float32 array})."""
    path = pathlib.Path(path)
    blob = path.read_bytes()
    if len(blob) < 8:
        raise DataFormatError(f"{path}: truncated checkpoint header")
    if blob[:4] != magic:
        raise DataFormatError(
            f"{path}: bad magic {blob[:4]!r}, expected {magic!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    off = 8
    out: dict[str, np.ndarray] = {}
    while off < len(blob):
        if off + 2 > len(blob):
            raise DataFormatError(f"{path}: truncated record at offset {off}")
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        if off + nlen + 1 > len(blob):
            raise DataFormatError(f"{path}: truncated tensor name at offset {off}")
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        rank = blob[off]
        off += 1
        if off + 4 * rank > len(blob):
            raise DataFormatError(f"{path}: truncated dims for tensor {name!r}")
        dims = struct.unpack_from(f"<{rank}I", blob, off) if rank else ()
        off += 4 * rank
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        nbytes = 4 * count
        if off + nbytes > len(blob):
            raise DataFormatError(f"{path}: truncated payload for tensor {name!r}")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(dims)
        out[name] = arr.astype(np.float32)
        off += nbytes
    return version, out
