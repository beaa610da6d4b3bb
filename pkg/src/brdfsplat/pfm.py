"""Minimal PFM (portable float map) reader/writer, little-endian, bottom-up rows."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def write_pfm(path: str | Path, data: np.ndarray) -> None:
    """data: (H, W) or (H, W, 3) float; stored as little-endian float32."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        header = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = b"PF"
    else:
        raise ValueError(f"PFM needs (H, W) or (H, W, 3), got {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")  # negative scale marks little-endian
        f.write(np.ascontiguousarray(data[::-1]).tobytes())


def read_pfm(path: str | Path) -> np.ndarray:
    """Returns float32 (H, W) or (H, W, 3) with rows restored top-down."""
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header == b"PF":
            channels = 3
        elif header == b"Pf":
            channels = 1
        else:
            raise ValueError(f"not a PFM file: header {header!r}")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(4 * w * h * channels), dtype=dtype)
    data = data.reshape((h, w, channels) if channels == 3 else (h, w))
    data = data[::-1].copy()
    return data.astype(np.float32) if scale < 0 else (data * scale).astype(np.float32)
