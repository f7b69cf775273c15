"""VCK1 checkpoint container.

Layout: ``b"VCK1"``, u32 manifest length, UTF-8 JSON manifest, then the raw
little-endian parameter blobs.  The manifest holds ``{"meta": ..., "tensors":
[{"name", "shape", "dtype", "offset", "nbytes"}, ...]}`` with offsets relative
to the start of the blob section.
"""

import json
import struct

import numpy as np

MAGIC = b"VCK1"


def save_checkpoint(path, state, meta=None):
    entries = []
    blobs = []
    offset = 0
    for name in sorted(state):
        arr = np.asarray(state[name])
        dtype = arr.dtype.newbyteorder("<")
        raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype.str,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"meta": meta or {}, "tensors": entries},
                          sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path):
    """Return ``(state, meta)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a VCK1 checkpoint")
    (mlen,) = struct.unpack("<I", raw[4:8])
    manifest = json.loads(raw[8:8 + mlen].decode("utf-8"))
    base = 8 + mlen
    state = {}
    for entry in manifest["tensors"]:
        start = base + entry["offset"]
        buf = raw[start:start + entry["nbytes"]]
        if len(buf) != entry["nbytes"]:
            raise ValueError(f"{path}: truncated blob for {entry['name']}")
        arr = np.frombuffer(buf, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        state[entry["name"]] = arr.astype(arr.dtype.newbyteorder("=")).copy()
    return state, manifest["meta"]
