"""Single-file checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic b"IVTCKPT1"
    8 bytes   uint64 header length N
    N bytes   UTF-8 JSON header: {"arrays": {name: {"offset", "shape"}}, "config",
              "seed", "step", "vocab"}; keys sorted, no whitespace
    rest      float32 LE array data; offsets are bytes from the start of this section

Arrays are laid out in sorted name order, so equal contents give equal bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"IVTCKPT1"
_LEN = struct.Struct("<Q")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    arrays: dict[str, np.ndarray]
    seed: int = 0
    step: int = 0
    vocab: list[str] = field(default_factory=list)

    def to_bytes(self) -> bytes:
        index, chunks, offset = {}, [], 0
        for name in sorted(self.arrays):
            arr = np.ascontiguousarray(self.arrays[name], dtype="<f4")
            index[name] = {"offset": offset, "shape": list(arr.shape)}
            chunks.append(arr.tobytes())
            offset += arr.nbytes
        header = {"arrays": index, "config": self.config, "seed": self.seed, "step": self.step, "vocab": self.vocab}
        head = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
        return b"".join([MAGIC, _LEN.pack(len(head)), head, *chunks])

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:8] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        if len(data) < 16:
            raise CheckpointError("truncated checkpoint header")
        (n,) = _LEN.unpack_from(data, 8)
        try:
            header = json.loads(data[16 : 16 + n].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"corrupt checkpoint header: {e}") from e
        base = 16 + n
        arrays = {}
        for name, meta in header["arrays"].items():
            shape = tuple(meta["shape"])
            count = int(np.prod(shape)) if shape else 1
            start = base + meta["offset"]
            if start + 4 * count > len(data):
                raise CheckpointError(f"truncated data for array {name!r}")
            arrays[name] = np.frombuffer(data, dtype="<f4", count=count, offset=start).reshape(shape).astype(np.float32)
        return cls(header["config"], arrays, header["seed"], header["step"], header["vocab"])

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())
