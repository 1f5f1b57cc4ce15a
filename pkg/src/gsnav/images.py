"""8-bit image I/O and the gradient mask used for seeding and loss masking.

Images live in memory as float64 (H, W, 3) arrays in [0, 1].  Files are
8-bit PNG or binary PPM; loading divides by 255, saving rounds back.  The
round/divide pair is the package-wide quantization convention, so a frame
rendered and saved by the simulator reloads bit-identically.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from .errors import DimensionMismatch

SOBEL_THRESHOLD = 0.05


def load_image(path) -> np.ndarray:
    """Read an 8-bit PNG/PPM file to a float (H, W, 3) array in [0, 1]."""
    with PILImage.open(Path(path)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def quantize(image: np.ndarray) -> np.ndarray:
    """Float [0,1] image to the uint8 values that save_image writes."""
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def save_image(path, image: np.ndarray) -> None:
    """Write a float [0,1] (H, W, 3) array as 8-bit PNG or PPM by extension."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionMismatch(f"expected (H, W, 3) image, got {image.shape}")
    path = Path(path)
    fmt = "PPM" if path.suffix.lower() in (".ppm", ".pnm") else "PNG"
    PILImage.fromarray(quantize(image), mode="RGB").save(path, format=fmt)


def to_gray(image: np.ndarray) -> np.ndarray:
    return np.mean(np.asarray(image, dtype=np.float64), axis=2)


def gradient_mask(image: np.ndarray, threshold: float = SOBEL_THRESHOLD) -> np.ndarray:
    """Boolean mask of pixels with Sobel gradient magnitude above threshold.

    Edge-dominant pixels carry the photometric signal; flat regions are
    excluded from seeding and from the tracking loss.
    """
    gray = to_gray(image) if image.ndim == 3 else np.asarray(image, dtype=np.float64)
    gx = ndimage.sobel(gray, axis=1, mode="nearest")
    gy = ndimage.sobel(gray, axis=0, mode="nearest")
    return np.hypot(gx, gy) > threshold
