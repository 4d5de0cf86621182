"""8-bit PNG helpers for saliency maps, masks, and input images."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import FormatError


def quantize_to_byte(values: np.ndarray) -> np.ndarray:
    """Map [0,1] floats to 8-bit levels, rounding halves up."""
    q = np.floor(255.0 * np.asarray(values, dtype=np.float64) + 0.5)
    return np.clip(q, 0.0, 255.0).astype(np.uint8)


def write_grayscale(path, values: np.ndarray) -> None:
    """Write a [0,1] float map as an 8-bit grayscale PNG."""
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise FormatError(f"grayscale maps are 2-D, got shape {arr.shape}")
    Image.fromarray(quantize_to_byte(arr), mode="L").save(Path(path))


def read_grayscale(path) -> np.ndarray:
    """Read a PNG as a [0,1] float64 map, converting to 8-bit grayscale."""
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("L"), dtype=np.float64)
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise FormatError(f"cannot read image {path}: {exc}") from exc
    return arr / 255.0


def read_binary_mask(path, size: "tuple[int, int] | None" = None) -> np.ndarray:
    """Read a PNG mask as bool, thresholding 8-bit values at 128.

    ``size`` is (height, width); when given, the mask is resized with
    nearest-neighbor before thresholding so it stays crisp.
    """
    try:
        with Image.open(path) as img:
            gray = img.convert("L")
            if size is not None and gray.size != (size[1], size[0]):
                gray = gray.resize((size[1], size[0]), Image.NEAREST)
            arr = np.asarray(gray, dtype=np.float64)
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise FormatError(f"cannot read image {path}: {exc}") from exc
    return arr >= 128.0


def write_rgb(path, image: np.ndarray) -> None:
    """Write a [0,1] float image of shape (3, H, W) as an RGB PNG."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise FormatError(f"expected (3, H, W) image, got shape {arr.shape}")
    byte = quantize_to_byte(arr).transpose(1, 2, 0)
    Image.fromarray(byte, mode="RGB").save(Path(path))


def read_rgb(path, size: "tuple[int, int] | None" = None) -> np.ndarray:
    """Read a PNG as a (3, H, W) float64 image in [0,1].

    ``size`` is (height, width); when given, the image is bilinearly
    resized before conversion.
    """
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB")
            if size is not None and rgb.size != (size[1], size[0]):
                rgb = rgb.resize((size[1], size[0]), Image.BILINEAR)
            arr = np.asarray(rgb, dtype=np.float64)
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise FormatError(f"cannot read image {path}: {exc}") from exc
    return arr.transpose(2, 0, 1) / 255.0
