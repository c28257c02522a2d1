"""Tile file I/O: 8-bit RGB PNG for H&E, 16-bit multi-page TIFF for mIF,
16-bit PNG for instance masks."""

from __future__ import annotations

import numpy as np
from PIL import Image, ImageSequence


def write_he_png(path: str, rgb: np.ndarray):
    arr = np.asarray(rgb)
    if arr.dtype != np.uint8:
        arr = np.clip(arr, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def read_he_png(path: str) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"))


def write_mif_tiff(path: str, channels: np.ndarray):
    """(C, H, W) -> multi-page 16-bit TIFF, one page per channel."""
    arr = np.asarray(channels)
    if arr.ndim != 3:
        raise ValueError(f"expected (C, H, W), got {arr.shape}")
    arr = np.clip(arr, 0, 65535).astype(np.uint16)
    pages = [Image.fromarray(c) for c in arr]
    pages[0].save(path, format="TIFF", save_all=True, append_images=pages[1:])


def read_mif_tiff(path: str) -> np.ndarray:
    img = Image.open(path)
    frames = [np.asarray(frame, dtype=np.uint16) for frame in ImageSequence.Iterator(img)]
    return np.stack(frames)


def write_mask_png(path: str, labels: np.ndarray):
    arr = np.asarray(labels)
    if arr.max() > 65535:
        raise ValueError("instance ids exceed 16-bit mask range")
    Image.fromarray(arr.astype(np.uint16)).save(path, format="PNG")


def read_mask_png(path: str) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.int64)
