"""8-bit PNG <-> (1, C, H, W) float tensors in [0, 1]."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .tensor import Tensor


def read_rgb(path: str | Path) -> Tensor:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return Tensor(arr.transpose(2, 0, 1)[None])


def read_mask(path: str | Path) -> Tensor:
    """Grayscale mask thresholded at 128."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return Tensor((arr >= 128).astype(np.float32)[None, None])


def to_uint8(img: np.ndarray) -> np.ndarray:
    """(C, H, W) or (1, C, H, W) floats -> (H, W, C) uint8, clamped to [0, 1] first."""
    a = np.asarray(img)
    if a.ndim == 4:
        a = a[0]
    a = np.clip(a, 0.0, 1.0).transpose(1, 2, 0)
    return np.rint(a * 255.0).astype(np.uint8)


def write_rgb(path: str | Path, img) -> None:
    data = img.data if isinstance(img, Tensor) else img
    Image.fromarray(to_uint8(data), mode="RGB").save(path, format="PNG")


def write_mask(path: str | Path, mask) -> None:
    data = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    data = data.reshape(data.shape[-2:])
    Image.fromarray(np.where(data >= 0.5, 255, 0).astype(np.uint8), mode="L").save(path, format="PNG")
