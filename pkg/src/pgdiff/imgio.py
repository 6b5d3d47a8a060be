"""PNG round-tripping for [-1, 1] float images."""

from __future__ import annotations

import numpy as np
from PIL import Image


def to_uint8(img):
    """(3, h, w) floats in [-1, 1] -> (h, w, 3) uint8."""
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected (3, h, w), got {arr.shape}")
    arr = np.clip((arr + 1.0) * 0.5, 0.0, 1.0)
    return np.round(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(arr):
    """(h, w, 3) uint8 -> (3, h, w) floats in [-1, 1]."""
    return arr.astype(np.float64).transpose(2, 0, 1) / 255.0 * 2.0 - 1.0


def save_png(path, img):
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


def load_png(path):
    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))
