"""Image and raw-array file I/O: binary PPM (P6) frames and raw float dumps."""

from __future__ import annotations

import numpy as np


def to_uint8(img):
    """Quantize a float image in [0, 1] to 8 bits."""
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, img):
    """Write a float [H, W, 3] image in [0, 1] as binary P6."""
    arr = to_uint8(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError("expected [H, W, 3] image")
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes())


def read_ppm(path):
    """Read a binary P6 image, returning float [H, W, 3] in [0, 1]."""
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P6"):
        raise ValueError(f"not a P6 file: {path}")
    # Header: magic, width, height, maxval, separated by whitespace.
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    arr = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return arr.reshape(h, w, 3).astype(np.float64) / maxval


def write_raw(path, arr, dtype="<f4"):
    """Raw float dump with a one-line header: magic, dtype, shape."""
    arr = np.ascontiguousarray(np.asarray(arr, dtype=dtype))
    shape = "x".join(str(d) for d in arr.shape)
    with open(path, "wb") as f:
        f.write(f"KFRAW1 {dtype} {shape}\n".encode("ascii"))
        f.write(arr.tobytes())


def read_raw(path):
    with open(path, "rb") as f:
        header = f.readline().decode("ascii").split()
        if header[0] != "KFRAW1":
            raise ValueError(f"not a raw dump: {path}")
        dtype, shape = header[1], tuple(int(d) for d in header[2].split("x"))
        return np.frombuffer(f.read(), dtype=dtype).reshape(shape).astype(np.float64)
