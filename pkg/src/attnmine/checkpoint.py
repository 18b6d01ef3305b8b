"""Deterministic binary checkpoints.

Layout: magic ``ATCK``, u32 little-endian version, u64 step counter, u32
config-JSON byte length, the JSON (sorted keys, compact separators), u32
array count, then per named array: u16 name length + UTF-8 name, u8 rank,
u32 dims, and the float64 little-endian payload. Arrays keep insertion
order, so save -> load -> save is byte-identical.
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict

import numpy as np

from .errors import BadMagicError, DataError, TruncatedFileError

MAGIC = b"ATCK"
VERSION = 1


@dataclass
class Checkpoint:
    config: dict
    step: int = 0
    arrays: Dict[str, np.ndarray] = field(default_factory=dict)
    version: int = VERSION

    def put(self, name: str, values: np.ndarray) -> None:
        arr = np.asarray(values, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = arr.copy()  # keeps 0-d shape, unlike ascontiguousarray
        self.arrays[name] = arr

    def to_bytes(self) -> bytes:
        blob = bytearray()
        blob += MAGIC
        blob += struct.pack("<IQ", self.version, self.step)
        cfg = json.dumps(self.config, sort_keys=True,
                         separators=(",", ":")).encode("utf-8")
        blob += struct.pack("<I", len(cfg))
        blob += cfg
        blob += struct.pack("<I", len(self.arrays))
        for name, arr in self.arrays.items():
            encoded = name.encode("utf-8")
            blob += struct.pack("<H", len(encoded))
            blob += encoded
            blob += struct.pack("<B", arr.ndim)
            for d in arr.shape:
                blob += struct.pack("<I", d)
            blob += np.ascontiguousarray(arr, dtype="<f8").tobytes()
        return bytes(blob)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        view = memoryview(blob)
        pos = 0

        def take(n):
            nonlocal pos
            if pos + n > len(view):
                raise TruncatedFileError(
                    f"checkpoint truncated at byte {pos} (needed {n} more)"
                )
            out = view[pos : pos + n]
            pos += n
            return out

        if bytes(take(4)) != MAGIC:
            raise BadMagicError("not a checkpoint file (bad magic)")
        version, step = struct.unpack("<IQ", take(12))
        if version != VERSION:
            raise DataError(f"checkpoint version {version}, expected {VERSION}")
        (cfg_len,) = struct.unpack("<I", take(4))
        try:
            config = json.loads(bytes(take(cfg_len)).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataError("corrupt checkpoint config block") from exc
        (count,) = struct.unpack("<I", take(4))
        arrays: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", take(2))
            name = bytes(take(name_len)).decode("utf-8")
            (rank,) = struct.unpack("<B", take(1))
            shape = tuple(struct.unpack("<I", take(4))[0] for _ in range(rank))
            n_items = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(take(n_items * 8), dtype="<f8").reshape(shape)
            arrays[name] = data.astype(np.float64)
        if pos != len(view):
            raise DataError(f"{len(view) - pos} trailing bytes in checkpoint")
        return cls(config=config, step=step, arrays=arrays, version=version)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        p = Path(path)
        if not p.is_file():
            raise DataError(f"checkpoint not found: {p}")
        return cls.from_bytes(p.read_bytes())
