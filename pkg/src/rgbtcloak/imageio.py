"""PNG helpers: unit-interval float arrays to/from 8- and 16-bit files."""

import numpy as np
from PIL import Image


def quantize8(values):
    """Snap floats in [0,1] to the 8-bit grid."""
    arr = np.asarray(values, dtype=np.float64)
    return np.rint(np.clip(arr, 0.0, 1.0) * 255.0) / 255.0


def quantize16(values):
    """Snap floats in [0,1] to the 16-bit grid."""
    arr = np.asarray(values, dtype=np.float64)
    return np.rint(np.clip(arr, 0.0, 1.0) * 65535.0) / 65535.0


def save_png8(path, values):
    """Write [H,W] or [H,W,3] floats in [0,1] as an 8-bit PNG."""
    arr = np.asarray(values, dtype=np.float64)
    q = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(q).save(path)


def save_png16(path, values):
    """Write [H,W] floats in [0,1] as a 16-bit grayscale PNG."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"16-bit PNG is single-channel, got shape {arr.shape}")
    q = np.rint(np.clip(arr, 0.0, 1.0) * 65535.0).astype(np.uint16)
    img = Image.fromarray(q)
    img.save(path)


def load_png(path):
    """Read a PNG as floats in [0,1]; returns (array, bit_depth).

    8-bit images normalize by 255, 16-bit by 65535. RGB stays [H,W,3],
    grayscale collapses to [H,W].
    """
    img = Image.open(path)
    if img.mode in ("I;16", "I;16B", "I"):
        arr = np.asarray(img, dtype=np.uint32)
        return arr.astype(np.float64) / 65535.0, 16
    if img.mode in ("L", "RGB"):
        arr = np.asarray(img, dtype=np.uint8)
        return arr.astype(np.float64) / 255.0, 8
    if img.mode in ("RGBA", "LA", "P"):
        conv = img.convert("RGB")
        arr = np.asarray(conv, dtype=np.uint8)
        return arr.astype(np.float64) / 255.0, 8
    raise ValueError(f"unsupported PNG mode {img.mode!r} in {path}")
