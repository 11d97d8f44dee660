"""Flat binary checkpoint container.

Layout: a textual header (magic line, one ``name shape offset`` line per
array, ``END`` terminator) followed by the concatenated little-endian
float64 payload.  Round trips are bit-exact.
"""

from __future__ import annotations

import numpy as np

MAGIC = "KFCKPT1"


def save_arrays(path, arrays):
    """Write named float64 arrays to ``path``.  Scalars are stored as 0-d."""
    header = [MAGIC]
    payload = []
    offset = 0
    for name, arr in arrays.items():
        if any(c.isspace() for c in name):
            raise ValueError(f"array name may not contain whitespace: {name!r}")
        arr = np.asarray(arr, dtype="<f8")
        if arr.ndim:
            arr = np.ascontiguousarray(arr)   # 0-d would be promoted to 1-d
        shape = "x".join(str(d) for d in arr.shape) if arr.ndim else "scalar"
        header.append(f"{name} {shape} {offset}")
        payload.append(arr.tobytes())
        offset += arr.nbytes
    header.append("END\n")
    with open(path, "wb") as f:
        f.write("\n".join(header).encode("ascii"))
        for chunk in payload:
            f.write(chunk)


def load_arrays(path):
    with open(path, "rb") as f:
        data = f.read()
    end = data.find(b"END\n")
    if not data.startswith(MAGIC.encode("ascii")) or end < 0:
        raise ValueError(f"not a checkpoint file: {path}")
    lines = data[:end].decode("ascii").strip().split("\n")[1:]
    body = data[end + 4:]
    arrays = {}
    for line in lines:
        name, shape_s, offset_s = line.split(" ")
        shape = () if shape_s == "scalar" else tuple(int(d) for d in shape_s.split("x"))
        count = int(np.prod(shape)) if shape else 1
        offset = int(offset_s)
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=offset).reshape(shape)
        arrays[name] = arr.copy()
    return arrays
