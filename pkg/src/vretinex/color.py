"""RGB/HSV conversion and color-preserving regrouping.

Images are numpy arrays of unit-interval floats: an RGB image has shape
(H, W, 3) and a single plane (hue, saturation or value) has shape (H, W).
Hue is stored as a fraction of a full turn in [0, 1); achromatic pixels
get hue 0. The value plane always equals the channel-wise maximum of the
RGB image, which is what makes the decomposition exactly invertible.
"""

from __future__ import annotations

from pathlib import Path
from typing import NamedTuple

import numpy as np
from PIL import Image


IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}


class HsvPlanes(NamedTuple):
    """The three HSV planes of an image, each shaped (H, W)."""

    hue: np.ndarray
    saturation: np.ndarray
    value: np.ndarray


def validate_rgb_image(img: np.ndarray) -> None:
    """Raise ValueError unless `img` is a valid (H, W, 3) unit-interval image."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) RGB array, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError("image must have at least one pixel")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image components must lie in [0, 1]")


def rgb_to_hsv(img: np.ndarray) -> HsvPlanes:
    """Convert a unit-interval RGB image to hexcone HSV planes.

    The returned value plane is exactly ``img.max(axis=-1)``; saturation is
    0 wherever value is 0, and hue is 0 for achromatic pixels.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) RGB array, got shape {img.shape}")
    r, g, b = img[..., 0], img[..., 1], img[..., 2]

    v = np.max(img, axis=-1)
    c = v - np.min(img, axis=-1)

    safe_v = np.where(v > 0.0, v, 1.0)
    s = np.where(v > 0.0, c / safe_v, 0.0)

    safe_c = np.where(c > 0.0, c, 1.0)
    h = np.select(
        [r == v, g == v],
        [((g - b) / safe_c) % 6.0, (b - r) / safe_c + 2.0],
        default=(r - g) / safe_c + 4.0,
    )
    h = np.where(c > 0.0, h / 6.0, 0.0)
    # (g - b) % 6 can round to 6.0 for tiny negative numerators; 1.0 wraps to 0.
    h = np.where(h >= 1.0, 0.0, h)
    return HsvPlanes(hue=h, saturation=s, value=v)


def hsv_to_rgb(planes: HsvPlanes) -> np.ndarray:
    """Invert the hexcone mapping; the result is clamped to [0, 1]."""
    h = np.asarray(planes.hue, dtype=np.float64)
    s = np.asarray(planes.saturation, dtype=np.float64)
    v = np.asarray(planes.value, dtype=np.float64)
    if not (h.shape == s.shape == v.shape):
        raise ValueError(
            f"HSV planes disagree on shape: {h.shape}, {s.shape}, {v.shape}"
        )

    h6 = (h % 1.0) * 6.0
    sector = np.floor(h6).astype(np.int64) % 6
    f = h6 - np.floor(h6)

    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))

    # One row per sector of the hexcone.
    channels = np.stack(
        [
            np.stack([v, t, p], axis=-1),
            np.stack([q, v, p], axis=-1),
            np.stack([p, v, t], axis=-1),
            np.stack([p, q, v], axis=-1),
            np.stack([t, p, v], axis=-1),
            np.stack([v, p, q], axis=-1),
        ],
        axis=0,
    )
    rgb = np.take_along_axis(channels, sector[None, ..., None], axis=0)[0]
    return np.clip(rgb, 0.0, 1.0)


def regroup(colors: HsvPlanes, enhanced_value: np.ndarray) -> np.ndarray:
    """Recombine original hue/saturation with a replacement value plane."""
    enhanced_value = np.asarray(enhanced_value, dtype=np.float64)
    if enhanced_value.shape != colors.hue.shape:
        raise ValueError(
            f"value plane shape {enhanced_value.shape} does not match "
            f"color planes {colors.hue.shape}"
        )
    return hsv_to_rgb(HsvPlanes(colors.hue, colors.saturation, enhanced_value))


def to_bytes(img: np.ndarray) -> np.ndarray:
    """Quantize unit-interval intensities to uint8, rounding half up."""
    img = np.asarray(img, dtype=np.float64)
    return np.clip(np.floor(img * 255.0 + 0.5), 0.0, 255.0).astype(np.uint8)


def from_bytes(raw: np.ndarray) -> np.ndarray:
    """Normalize 8-bit intensities to unit-interval floats."""
    return np.asarray(raw, dtype=np.float64) / 255.0


def load_image(path: str | Path) -> np.ndarray:
    """Decode a PNG/JPEG file into a unit-interval RGB array.

    Raises PIL's decode errors (``UnidentifiedImageError``/``OSError``) on
    malformed files.
    """
    with Image.open(path) as im:
        rgb = im.convert("RGB")
        return from_bytes(np.asarray(rgb))


def save_image(img: np.ndarray, path: str | Path) -> None:
    """Quantize and write an RGB image; format follows the file extension."""
    Image.fromarray(to_bytes(img)).save(path)


def save_plane(plane: np.ndarray, path: str | Path) -> None:
    """Write a single plane as a grayscale image, clamping to [0, 1]."""
    data = np.clip(np.asarray(plane, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(to_bytes(data), mode="L").save(path)
