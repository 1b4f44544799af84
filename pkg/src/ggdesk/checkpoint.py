"""Checkpoint container: named tensors plus a JSON metadata blob.

Layout: magic ``GGDK``, version u32, u64 header length, UTF-8 JSON header
(name -> shape/dtype/offset plus free-form ``meta``), little-endian raw
buffers, CRC32 trailer over everything before it.  Round-trips are
bit-exact; any truncation or corruption fails the CRC.
"""

import json
import struct
import zlib

import numpy as np

from .errors import CheckpointError

MAGIC = b"GGDK"
VERSION = 1

_DTYPES = {"f32": "<f4", "f64": "<f8"}
_DTYPE_NAMES = {np.dtype("<f4"): "f32", np.dtype("<f8"): "f64"}


def save_tensors(path, tensors, meta=None):
    """Write ``{name: ndarray}`` and optional JSON-serializable ``meta``."""
    names = list(tensors)
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate tensor names")
    entries = {}
    offset = 0
    buffers = []
    for name in names:
        arr = np.ascontiguousarray(tensors[name])
        dt = np.dtype(arr.dtype).newbyteorder("<")
        if dt not in _DTYPE_NAMES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        buf = arr.astype(dt, copy=False).tobytes()
        entries[name] = {
            "shape": list(arr.shape),
            "dtype": _DTYPE_NAMES[dt],
            "offset": offset,
            "nbytes": len(buf),
        }
        offset += len(buf)
        buffers.append(buf)
    header = json.dumps({"tensors": entries, "meta": meta or {}},
                        sort_keys=True).encode("utf-8")
    body = b"".join(
        [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(header)), header]
        + buffers
    )
    crc = zlib.crc32(body) & 0xFFFFFFFF
    with open(path, "wb") as f:
        f.write(body)
        f.write(struct.pack("<I", crc))


def load_tensors(path):
    """Read a checkpoint; returns ({name: ndarray}, meta dict)."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 20 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a GGDK checkpoint")
    body, trailer = raw[:-4], raw[-4:]
    if zlib.crc32(body) & 0xFFFFFFFF != struct.unpack("<I", trailer)[0]:
        raise CheckpointError(f"{path}: CRC mismatch (corrupt or truncated)")
    version = struct.unpack("<I", body[4:8])[0]
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    hlen = struct.unpack("<Q", body[8:16])[0]
    try:
        header = json.loads(body[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: bad header ({e})") from e
    data_start = 16 + hlen
    out = {}
    for name, ent in header["tensors"].items():
        dt = np.dtype(_DTYPES[ent["dtype"]])
        start = data_start + ent["offset"]
        buf = body[start : start + ent["nbytes"]]
        if len(buf) != ent["nbytes"]:
            raise CheckpointError(f"{path}: tensor {name} out of bounds")
        out[name] = np.frombuffer(buf, dtype=dt).reshape(ent["shape"]).copy()
    return out, header.get("meta", {})
