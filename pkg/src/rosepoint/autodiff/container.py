"""Named-tensor container file.

Layout (little-endian)::

    magic   b"RPTC"            4 bytes
    version uint32             currently 1
    hlen    uint64             byte length of the JSON header
    header  utf-8 JSON         {"meta": {...}, "tensors": [{name, shape, dtype, offset, nbytes}, ...]}
    data    raw tensor bytes   concatenated in table order, offsets relative to data start
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"RPTC"
VERSION = 1


class ContainerError(ValueError):
    pass


def write_container(path, tensors: dict, meta: dict | None = None) -> None:
    table, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        a = np.asarray(arr)
        dt = a.dtype.newbyteorder("<")
        raw = np.ascontiguousarray(a, dtype=dt).tobytes()
        table.append({"name": name, "shape": list(a.shape), "dtype": dt.str,
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "tensors": table}).encode()
    with open(Path(path), "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(header)))
        f.write(header)
        for c in chunks:
            f.write(c)


def read_container(path) -> tuple[dict, dict]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise ContainerError(f"{path}: not a tensor container")
    version, hlen = struct.unpack_from("<IQ", blob, 4)
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported container version {version}")
    start = 4 + struct.calcsize("<IQ")
    header = json.loads(blob[start:start + hlen].decode())
    data0 = start + hlen
    tensors = {}
    for rec in header["tensors"]:
        lo = data0 + rec["offset"]
        arr = np.frombuffer(blob, dtype=np.dtype(rec["dtype"]), count=int(np.prod(rec["shape"], dtype=np.int64)),
                            offset=lo).reshape(rec["shape"])
        tensors[rec["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return tensors, header["meta"]
