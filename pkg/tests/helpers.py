"""
Shared helpers for the test suite
"""
from pathlib import Path

import numpy as np


def read_pgm(path) -> np.ndarray:
    """Pixels of a binary (P5) PGM file, one row per image line."""
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM file")
    width, height = (int(v) for v in parts[1].split())
    pixels = np.frombuffer(parts[3], dtype=np.uint8)
    if pixels.size != width * height:
        raise ValueError(f"{path}: expected {width * height} pixels, got {pixels.size}")
    return pixels.reshape(height, width)
