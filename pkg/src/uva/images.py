"""8-bit PNG I/O for colour images, alpha maps and masks (values in [0, 1])."""

from __future__ import annotations

import numpy as np
from PIL import Image


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path, x: np.ndarray) -> None:
    arr = to_uint8(x)
    mode = "L" if arr.ndim == 2 else "RGB"
    # fixed encoder settings keep the bytes reproducible
    Image.fromarray(arr, mode=mode).save(path, format="PNG", optimize=False, compress_level=6)


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 3 and arr.shape[2] == 4:
        arr = arr[..., :3]
    return arr.astype(np.float64) / 255.0


def load_mask(path, threshold: float = 0.5) -> np.ndarray:
    m = load_png(path)
    if m.ndim == 3:
        m = m.mean(-1)
    return m >= threshold
