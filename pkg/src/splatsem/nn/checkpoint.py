"""SSCK container: a JSON manifest followed by raw little-endian tensors.

Layout: ``b"SSCK"``, u32 version, u64 manifest length, UTF-8 JSON manifest,
then tensor bytes in manifest order.  Each manifest entry records section,
path, dtype, shape and byte offset relative to the start of the data block.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SSCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, sections: dict, meta: dict | None = None) -> None:
    entries, blobs, off = [], [], 0
    for sec, tensors in sections.items():
        for name, arr in tensors.items():
            a = np.asarray(arr)
            dt = a.dtype.newbyteorder("<")
            raw = np.ascontiguousarray(a, dtype=dt).tobytes()
            entries.append({"section": sec, "path": name, "dtype": dt.str,
                            "shape": list(a.shape), "offset": off, "nbytes": len(raw)})
            blobs.append(raw)
            off += len(raw)
    manifest = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<IQ", VERSION, len(manifest)))
        fh.write(manifest)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path):
    """Return ``(sections, meta)`` with arrays in their stored dtypes."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, expected SSCK")
    version, mlen = struct.unpack_from("<IQ", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    head = 16
    manifest = json.loads(buf[head:head + mlen].decode())
    base = head + mlen
    sections = {}
    for e in manifest["tensors"]:
        start = base + e["offset"]
        if start + e["nbytes"] > len(buf):
            raise CheckpointError(f"{path}: truncated tensor {e['section']}/{e['path']}")
        dt = np.dtype(e["dtype"])
        a = np.frombuffer(buf, dt, e["nbytes"] // dt.itemsize, start).reshape(e["shape"])
        sections.setdefault(e["section"], {})[e["path"]] = a.astype(dt.newbyteorder("="))
    return sections, manifest["meta"]
