"""NTW1 named-tensor files.

Layout (little-endian): magic ``b"NTW1"``, u32 entry count, then per entry
a u16 name length, the UTF-8 name, a u8 rank, ``rank`` u32 extents and the
f32 data in row-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .nn.module import Module

MAGIC = b"NTW1"


class FormatError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


class WeightImportError(ValueError):
    def __init__(self, names: list[str]):
        super().__init__(f"shape mismatch for: {', '.join(names)}")
        self.names = names


def encode_ntw(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_ntw(buf: bytes) -> dict[str, np.ndarray]:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated {what}", pos)
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise FormatError("bad magic", 0)
    (count,) = struct.unpack("<I", take(4, "entry count"))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        start = pos
        try:
            name = take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("name is not UTF-8", start) from None
        (rank,) = struct.unpack("<B", take(1, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        n = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(take(4 * n, f"data of {name}"), dtype="<f4").astype(np.float32)
        out[name] = data.reshape(shape)
    if pos != len(buf):
        raise FormatError("trailing bytes", pos)
    return out


def save_ntw(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_ntw(tensors))


def load_ntw(path: str | Path) -> dict[str, np.ndarray]:
    return decode_ntw(Path(path).read_bytes())


def save_model(path: str | Path, model: Module) -> None:
    save_ntw(path, model.state_dict())


def import_weights(model: Module, tensors: dict[str, np.ndarray] | str | Path, strict_shapes: bool = True) -> list[str]:
    """Overlay matching tensors onto ``model`` in place.

    Returns the file's names that match nothing in the model. Frozen flags
    are left as they are. Any shape mismatch aborts before anything is
    written.
    """
    if not isinstance(tensors, dict):
        tensors = load_ntw(tensors)
    targets: dict[str, np.ndarray] = {n: p.data for n, p in model.named_parameters()}
    targets.update(dict(model.named_buffers()))
    bad = [n for n, a in tensors.items() if n in targets and targets[n].shape != a.shape]
    if bad and strict_shapes:
        raise WeightImportError(bad)
    for name, arr in tensors.items():
        if name in targets and name not in bad:
            targets[name][...] = arr
    return [n for n in tensors if n not in targets]
