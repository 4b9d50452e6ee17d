"""Binary PPM panels: grayscale backscatter/LDR and black/white masks."""
from __future__ import annotations

import numpy as np

from .errors import FormatError, ValidationError
from .preprocessing import preprocess_backscatter, preprocess_ldr


def to_gray(values: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255 (monotone); a constant grid maps to black."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        return np.zeros(v.shape, dtype=np.uint8)
    return np.round((v - lo) / (hi - lo) * 255.0).astype(np.uint8)


def backscatter_panel(raw: np.ndarray) -> np.ndarray:
    return to_gray(preprocess_backscatter(raw))


def ldr_panel(raw: np.ndarray) -> np.ndarray:
    return np.round(preprocess_ldr(raw) * 255.0).astype(np.uint8)


def mask_panel(mask: np.ndarray) -> np.ndarray:
    return np.where(np.asarray(mask) > 0, 255, 0).astype(np.uint8)


def encode_ppm(gray: np.ndarray) -> bytes:
    """P6 image; row 0 of the grid (lowest altitude) ends up at the bottom."""
    gray = np.asarray(gray, dtype=np.uint8)
    if gray.ndim != 2:
        raise ValidationError(f"panel must be 2-D, got shape {gray.shape}")
    h, w = gray.shape
    rgb = np.repeat(gray[::-1, :, None], 3, axis=2)
    return f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes()


def decode_ppm(buf: bytes) -> np.ndarray:
    """Inverse of :func:`encode_ppm` for the gray images it writes (returns H×W)."""
    parts = buf.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P6":
        raise FormatError("not a binary PPM (P6) image", offset=0)
    w, h = (int(v) for v in parts[1].split())
    if parts[2] != b"255":
        raise FormatError("only 8-bit PPM is supported")
    pixels = parts[3]
    if len(pixels) != 3 * w * h:
        raise FormatError(f"expected {3 * w * h} pixel bytes, found {len(pixels)}")
    rgb = np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3)
    return rgb[::-1, :, 0].copy()
