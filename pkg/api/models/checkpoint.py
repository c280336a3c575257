"""
Binary checkpoint codec shared by the vision backbone and the decoder.

Layout (little-endian), documented in docs/checkpoint_format.md:

    magic    4 bytes  b"RGCK"
    version  u16
    meta     u32 length + UTF-8 JSON
    count    u32
    entries  count x (u16 name length, name, u8 dtype code, u8 ndim, ndim x u32 shape, raw data)
"""

import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np
import torch

from ..errors import CheckpointFormatError

logger = logging.getLogger(__name__)

MAGIC = b"RGCK"
VERSION = 1
DTYPE_CODES = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<i8"),
    3: np.dtype("<i4"),
    4: np.dtype("u1"),  # bool
}
_CODE_OF = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2, np.dtype("int32"): 3, np.dtype("bool"): 4}


def save_checkpoint(path: Union[str, Path], state: Dict[str, torch.Tensor], metadata: Dict[str, Any] = None) -> None:
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<HI", VERSION, len(meta)), meta, struct.pack("<I", len(state))]
    for name, tensor in state.items():
        array = tensor.detach().cpu().contiguous().numpy()
        if array.dtype not in _CODE_OF:
            raise CheckpointFormatError(f"{name}: unsupported dtype {array.dtype}")
        code = _CODE_OF[array.dtype]
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<BB", code, array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype=DTYPE_CODES[code]).tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))
    logger.info(f"Saved checkpoint with {len(state)} tensors to {path}")


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise CheckpointFormatError(f"checkpoint truncated at byte {self.offset} (wanted {size} more)")
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, torch.Tensor], Dict[str, Any]]:
    reader = _Reader(Path(path).read_bytes())
    if reader.take(4) != MAGIC:
        raise CheckpointFormatError(f"{path} is not a checkpoint (bad magic)")
    version, meta_len = reader.unpack("<HI")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    try:
        metadata = json.loads(reader.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"corrupt checkpoint metadata: {e}") from e

    state: Dict[str, torch.Tensor] = {}
    (count,) = reader.unpack("<I")
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        code, ndim = reader.unpack("<BB")
        if code not in DTYPE_CODES:
            raise CheckpointFormatError(f"{name}: unknown dtype code {code}")
        shape = reader.unpack(f"<{ndim}I")
        dtype = DTYPE_CODES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        array = np.frombuffer(reader.take(size), dtype=dtype).reshape(shape)
        if code == 4:
            array = array.astype(bool)
        state[name] = torch.from_numpy(array.copy())
    if reader.offset != len(reader.data):
        raise CheckpointFormatError(f"{len(reader.data) - reader.offset} trailing bytes after the last tensor")
    return state, metadata
