"""Flat binary weight container with a JSON config block.

Layout (all integers little-endian):
    magic   4 bytes  b"CAEW"
    version u32      currently 1
    cfg_len u32      length of the UTF-8 JSON config that follows
    config  cfg_len bytes
    count   u32      number of named parameters
    per parameter:
        name_len u16, name (UTF-8), ndim u8, dims u32 x ndim,
        data: float64 little-endian, C order

Round-trips are bit-exact; the config JSON is the single source of truth
for the architecture the weights belong to.
"""

import json
import os
import struct
import numpy as np

from .tensor import Tensor

MAGIC = b"CAEW"
VERSION = 1


class WeightFormatError(ValueError):
    pass


def save_weights(path, params: dict, config: dict):
    """Write {name: Tensor} + config atomically (temp file + rename)."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    blob += struct.pack("<I", len(cfg))
    blob += cfg
    blob += struct.pack("<I", len(params))
    for name in sorted(params):
        data = np.ascontiguousarray(params[name].data, dtype="<f8")
        nb = name.encode("utf-8")
        blob += struct.pack("<H", len(nb))
        blob += nb
        blob += struct.pack("<B", data.ndim)
        for d in data.shape:
            blob += struct.pack("<I", d)
        blob += data.tobytes()
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(bytes(blob))
    os.replace(tmp, path)


def load_weights(path):
    """Read a container back as ({name: Tensor}, config)."""
    with open(path, "rb") as f:
        raw = f.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(raw):
            raise WeightFormatError(f"truncated weight file at byte {off}")
        chunk = raw[off:off + n]
        off += n
        return chunk

    if take(4) != MAGIC:
        raise WeightFormatError("bad magic: not a weight container")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise WeightFormatError(f"unsupported weight container version {version}")
    (cfg_len,) = struct.unpack("<I", take(4))
    config = json.loads(take(cfg_len).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(dims)) if ndim else 1
        data = np.frombuffer(take(8 * n), dtype="<f8").reshape(dims).copy()
        params[name] = Tensor(data, name=name)
    if off != len(raw):
        raise WeightFormatError(f"{len(raw) - off} trailing bytes after parameters")
    return params, config
