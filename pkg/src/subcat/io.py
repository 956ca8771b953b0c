"""Image and channel-dump I/O.

Images load from PNG or binary PPM/PGM into (H, W, 3) float64 arrays in
[0, 1]. Channel dumps are a debug format: an ASCII header line
``"W H C scale"`` followed by little-endian float32 planes in channel-major,
row-major order.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image as PILImage


def load_image(path) -> np.ndarray:
    with PILImage.open(path) as img:
        rgb = img.convert("RGB")
        arr = np.asarray(rgb, dtype=np.float64) / 255.0
    return arr


def save_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    out = (arr * 255.0 + 0.5).astype(np.uint8)
    PILImage.fromarray(out, mode="RGB").save(path)


def save_channels(path, planes: np.ndarray, scale: float) -> None:
    """Dump a (C, H, W) channel stack; header records W H C scale."""
    planes = np.ascontiguousarray(planes, dtype="<f4")
    c, h, w = planes.shape
    with open(path, "wb") as fh:
        fh.write(f"{w} {h} {c} {scale!r}\n".encode("ascii"))
        fh.write(planes.tobytes())


def load_channels(path) -> tuple[np.ndarray, float]:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        w, h, c = int(header[0]), int(header[1]), int(header[2])
        scale = float(header[3])
        data = np.frombuffer(fh.read(), dtype="<f4", count=c * h * w)
    return data.reshape(c, h, w).astype(np.float64), scale


def list_image_files(directory) -> list[Path]:
    """Sorted image files in a directory (stable processing order)."""
    directory = Path(directory)
    exts = {".png", ".ppm", ".pgm"}
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in exts)
