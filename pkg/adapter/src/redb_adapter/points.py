"""Reader for the pipeline's raw point files.

Format: little-endian float32 records of (x, y, z, intensity), no header.
"""

from pathlib import Path

import numpy as np

RECORD_BYTES = 16


def read_points(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) % RECORD_BYTES != 0:
        raise ValueError(f"{path}: not a multiple of {RECORD_BYTES} bytes")
    pts = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    if pts.size and not np.isfinite(pts).all():
        raise ValueError(f"{path}: non-finite payload")
    return pts


def write_points(points: np.ndarray, path) -> None:
    pts = np.ascontiguousarray(points, dtype="<f4")
    if pts.ndim != 2 or pts.shape[1] != 4:
        raise ValueError(f"expected (n, 4) points, got {pts.shape}")
    Path(path).write_bytes(pts.tobytes())
