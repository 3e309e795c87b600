"""Named-tensor flat file.

Layout (all integers little-endian)::

    b"BYOV"  u32 version
    repeated until EOF:
        u32 name_len, name (UTF-8), u32 rank, u64 dims[rank], f64 payload[prod(dims)]

Payloads are written row-major; round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"BYOV"
VERSION = 1
_META_PREFIX = "meta/"


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes(order="C"))
    tmp.replace(path)


def load_tensors(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r} at byte 0")
    if len(buf) < 8:
        raise CheckpointError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    out: dict[str, np.ndarray] = {}
    pos = 8
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            count = int(np.prod(dims, dtype=np.int64)) if rank else 1
            end = pos + 8 * count
            if end > len(buf):
                raise CheckpointError(f"{path}: payload of '{name}' truncated at byte {pos}")
            out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
            pos = end
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated record at byte {pos}") from exc
    return out


def encode_text(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def decode_text(arr: np.ndarray) -> str:
    return arr.astype(np.uint8).tobytes().decode("utf-8")


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    """Write tensors plus a JSON metadata record stored as a byte tensor."""
    payload = dict(tensors)
    if meta is not None:
        payload[_META_PREFIX + "json"] = encode_text(json.dumps(meta, sort_keys=True))
    save_tensors(path, payload)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    tensors = load_tensors(path)
    raw = tensors.pop(_META_PREFIX + "json", None)
    meta = json.loads(decode_text(raw)) if raw is not None else {}
    return tensors, meta
