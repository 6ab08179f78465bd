"""PNG/PGM reading and writing, and clip directories on disk."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import Clip, load_annotations


def load_image(path) -> np.ndarray:
    """Image file as a float ``C x H x W`` array in [0, 1] (C = 1 for grayscale)."""
    with Image.open(path) as im:
        if im.mode in ("L", "I", "I;16", "F"):
            arr = np.asarray(im, dtype=np.float64)
            peak = 65535.0 if arr.max() > 255 else 255.0
            return (arr / peak)[None]
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return np.transpose(arr, (2, 0, 1))


def save_png(path, image: np.ndarray) -> None:
    """Save ``C x H x W`` (C in {1, 3}) values in [0, 1], or an ``H x W x 3`` uint8 array."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if image.dtype == np.uint8 and image.ndim == 3 and image.shape[-1] == 3:
        Image.fromarray(image).save(path)
        return
    arr = np.clip(np.asarray(image, dtype=np.float64), 0, 1)
    arr = (arr * 255).round().astype(np.uint8)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    elif arr.ndim == 3:
        arr = np.transpose(arr, (1, 2, 0))
    Image.fromarray(arr).save(path)


def load_clip(directory) -> Clip:
    """A clip directory: ``frames/NNNNNN.png`` plus ``contours.csv`` / ``events.csv``."""
    directory = Path(directory)
    tracks = load_annotations(directory)
    frame_dir = directory / "frames"

    def load_frame(i: int) -> np.ndarray:
        img = load_image(frame_dir / f"{i:06d}.png")
        return np.repeat(img, 3, axis=0) if img.shape[0] == 1 else img

    return Clip(directory.name, tracks, load_frame)
