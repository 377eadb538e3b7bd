"""Seed derivation and PNG input/output."""

from pathlib import Path

import numpy as np
from PIL import Image


def derive_seed(seed, *keys):
    """Deterministic 63-bit child seed from a parent seed and integer/string keys."""
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for key in keys:
        if isinstance(key, str):
            words.extend(key.encode())
        else:
            words.append(int(key) & 0xFFFFFFFFFFFFFFFF)
    state = np.random.SeedSequence(words).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


def to_uint8(image):
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(
        np.uint8
    )


def write_png(path, image):
    """Save an H,W or H,W,3 float image in [0, 1] as 8-bit PNG."""
    path = Path(path)
    arr = to_uint8(image)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    # fixed encoder settings keep the bytes reproducible
    Image.fromarray(arr).save(path, format="PNG", optimize=False, compress_level=6)
    return path


def read_png(path):
    """Load a PNG as float64 H,W,3 in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0
