"""Binary PGM (P5) dump for eyeballing generated samples without dependencies."""
from __future__ import annotations

import numpy as np


def to_pgm_bytes(image: np.ndarray) -> bytes:
    """Map a (H, W) or (1, H, W) image in [-1, 1] to 8-bit P5 bytes."""
    img = np.asarray(image)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim != 2:
        raise ValueError(f"expected a single-channel image, got shape {image.shape}")
    h, w = img.shape
    gray = np.clip((img + 1.0) * 127.5, 0, 255).astype(np.uint8)
    return f"P5\n{w} {h}\n255\n".encode("ascii") + gray.tobytes()


def write_pgm(path, image: np.ndarray):
    with open(path, "wb") as fh:
        fh.write(to_pgm_bytes(image))
