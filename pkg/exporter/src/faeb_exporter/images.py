"""Class-foldered image discovery and preprocessing.

A dataset root holds one sub-folder per class; folder names become the
class-name table, sorted lexicographically so label ids are stable across
machines and listing order. Images are resized to 224x224 (bilinear) and
z-scored per image per channel; constant channels become zeros rather
than dividing by ~0.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

TARGET_SIZE = 224
IMAGE_EXTENSIONS = {".bmp", ".gif", ".jpeg", ".jpg", ".png", ".webp"}


def scan_image_root(root):
    """Return [(class_name, [image paths])], classes and files both sorted.

    Non-directories at the top level and files without an image extension
    are ignored. Zero class folders is a hard error: an empty export is
    always an operator mistake.
    """
    root = Path(root)
    if not root.is_dir():
        raise ValueError(f"image root {root} is not a directory")
    classes = sorted(p for p in root.iterdir() if p.is_dir())
    if not classes:
        raise ValueError(f"image root {root} contains no class folders")
    out = []
    for class_dir in classes:
        files = sorted(p for p in class_dir.iterdir()
                       if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)
        out.append((class_dir.name, files))
    return out


def load_image(path) -> np.ndarray:
    """Decode, resize to 224x224, z-score per channel.

    Returns (224, 224, 3) float64. Raises OSError (or ValueError) for
    files PIL cannot decode; callers decide whether to skip.
    """
    with Image.open(path) as img:
        rgb = img.convert("RGB").resize((TARGET_SIZE, TARGET_SIZE), Image.BILINEAR)
    x = np.asarray(rgb, dtype=np.float64)
    mean = x.mean(axis=(0, 1))
    std = x.std(axis=(0, 1))
    return (x - mean) / np.where(std > 0.0, std, 1.0)
