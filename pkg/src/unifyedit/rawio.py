"""Raw float64 array files.

Layout: one ASCII JSON header line ``{"dtype": "<f8", "shape": [...]}`` followed
by the little-endian float64 payload in C order.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

DTYPE_TAG = "<f8"


def save_array(path, array) -> Path:
    path = Path(path)
    arr = np.ascontiguousarray(np.asarray(array, dtype=DTYPE_TAG))
    header = json.dumps({"dtype": DTYPE_TAG, "shape": list(arr.shape)}) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(arr.tobytes(order="C"))
    return path


def load_array(path) -> np.ndarray:
    """Read an array written by :func:`save_array`; ``.npy`` files are also accepted."""
    path = Path(path)
    if path.suffix == ".npy":
        return np.asarray(np.load(path), dtype=np.float64)
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("ascii"))
        payload = fh.read()
    if header.get("dtype") != DTYPE_TAG:
        raise ValueError(f"{path}: unsupported dtype tag {header.get('dtype')!r}")
    shape = tuple(int(s) for s in header["shape"])
    arr = np.frombuffer(payload, dtype=DTYPE_TAG)
    if arr.size != int(np.prod(shape)):
        raise ValueError(f"{path}: payload has {arr.size} values, header says {shape}")
    return arr.reshape(shape).astype(np.float64)
