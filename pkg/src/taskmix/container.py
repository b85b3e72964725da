"""CMLT container I/O for tensors, images, embeddings, and checkpoints.

Single-tensor file (version 1):

    magic  b"CMLT"
    u8     version = 1
    u8     dtype   = 1  (float64)
    u8     rank
    u64le  dims[rank]
    f64le  payload, row-major

Multi-tensor bundle (version 2) reuses the magic with a version byte of 2:

    magic  b"CMLT"
    u8     version = 2
    u64le  header length
    bytes  UTF-8 JSON {"meta": {...}, "index": {name: {"offset", "length"}}}
    bytes  concatenated version-1 records, offsets relative to payload start

The JSON header carries run metadata (model config, extractor seed, ...)
and never contains timestamps, so identical runs produce identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ContractError

MAGIC = b"CMLT"
DTYPE_F64 = 1


def tensor_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    head = MAGIC + struct.pack("<BBB", 1, DTYPE_F64, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    return head + dims + arr.astype("<f8").tobytes()


def _parse_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    if buf[offset:offset + 4] != MAGIC:
        raise ContractError("not a CMLT record (bad magic)")
    version, dtype, rank = struct.unpack_from("<BBB", buf, offset + 4)
    if version != 1:
        raise ContractError(f"expected single-tensor record (version 1), got {version}")
    if dtype != DTYPE_F64:
        raise ContractError(f"unsupported dtype code {dtype}")
    pos = offset + 7
    dims = struct.unpack_from(f"<{rank}Q", buf, pos) if rank else ()
    pos += 8 * rank
    count = int(np.prod(dims)) if rank else 1
    payload = np.frombuffer(buf, dtype="<f8", count=count, offset=pos)
    pos += 8 * count
    return payload.astype(np.float64).reshape(dims), pos


def write_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(tensor_bytes(arr))


def read_tensor(path) -> np.ndarray:
    arr, _ = _parse_tensor(Path(path).read_bytes())
    return arr


def write_bundle(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    blobs: dict[str, bytes] = {name: tensor_bytes(a) for name, a in tensors.items()}
    index = {}
    offset = 0
    for name, blob in blobs.items():
        index[name] = {"offset": offset, "length": len(blob)}
        offset += len(blob)
    header = json.dumps(
        {"meta": meta or {}, "index": index}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<B", 2) + struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs.values():
            fh.write(blob)


def read_bundle(path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ContractError(f"{path}: not a CMLT file (bad magic)")
    (version,) = struct.unpack_from("<B", buf, 4)
    if version != 2:
        raise ContractError(f"{path}: expected bundle (version 2), got {version}")
    (hlen,) = struct.unpack_from("<Q", buf, 5)
    header = json.loads(buf[13:13 + hlen].decode("utf-8"))
    base = 13 + hlen
    tensors = {}
    for name, entry in header["index"].items():
        arr, _ = _parse_tensor(buf, base + entry["offset"])
        tensors[name] = arr
    return header["meta"], tensors
