"""End-to-end enhancement.

Decompose to HSV, estimate the reflectance of the value plane, and
regroup it with the untouched hue and saturation: every color in the
output comes from the input, only brightness changes. Inputs of
arbitrary size are reflect-padded up to the network's required multiple
of 16 and cropped back afterwards.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .color import (
    HsvPlanes,
    load_image,
    regroup,
    rgb_to_hsv,
    save_image,
    save_plane,
    validate_rgb_image,
)
from .disturbance import disturb, sample_gamma
from .network import DOWNSAMPLE_FACTOR, ReflectanceNet, forward


@dataclass
class EnhanceResult:
    enhanced: np.ndarray
    reflectance: np.ndarray
    inverse_illumination: np.ndarray
    timings: dict[str, float] = field(default_factory=dict)


def _pad_amounts(h: int, w: int) -> tuple[int, int]:
    pad_h = (-h) % DOWNSAMPLE_FACTOR
    pad_w = (-w) % DOWNSAMPLE_FACTOR
    return pad_h, pad_w


def _reflect_pad(plane: np.ndarray, pad_h: int, pad_w: int) -> np.ndarray:
    """Mirror-pad bottom/right edges; applied in chunks so planes smaller
    than the padding amount still work."""
    out = plane
    while pad_h > 0 or pad_w > 0:
        step_h = min(pad_h, out.shape[0])
        step_w = min(pad_w, out.shape[1])
        out = np.pad(out, ((0, step_h), (0, step_w)), mode="symmetric")
        pad_h -= step_h
        pad_w -= step_w
    return out


def enhance(img: np.ndarray, net: ReflectanceNet) -> EnhanceResult:
    """Enhance one RGB image with a trained reflectance network.

    The reflectance is clamped to [0, 1] before regrouping so the result
    is a valid HSV value plane; output dimensions always equal input
    dimensions.
    """
    validate_rgb_image(img)
    timings: dict[str, float] = {}

    t0 = time.perf_counter()
    hsv = rgb_to_hsv(img)
    timings["decompose"] = time.perf_counter() - t0

    h, w = hsv.value.shape
    pad_h, pad_w = _pad_amounts(h, w)
    v = _reflect_pad(hsv.value, pad_h, pad_w).astype(np.float32)

    t0 = time.perf_counter()
    out = forward(net, v)
    timings["forward"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    reflectance = np.clip(out.reflectance[:h, :w].astype(np.float64), 0.0, 1.0)
    inverse_illumination = out.inverse_illumination[:h, :w].astype(np.float64)
    enhanced = regroup(hsv, reflectance)
    timings["regroup"] = time.perf_counter() - t0

    return EnhanceResult(
        enhanced=enhanced,
        reflectance=reflectance,
        inverse_illumination=inverse_illumination,
        timings=timings,
    )


def regroup_demo(low: np.ndarray, normal: np.ndarray) -> np.ndarray:
    """Recombine the colors of `low` with the brightness of `normal`.

    Demonstrates that hue/saturation of a dark exposure already carry the
    scene's colors: the result looks like the normal exposure while every
    color is taken from the dark one.
    """
    validate_rgb_image(low)
    validate_rgb_image(normal)
    if low.shape != normal.shape:
        raise ValueError(f"image shapes differ: {low.shape} vs {normal.shape}")
    return regroup(rgb_to_hsv(low), rgb_to_hsv(normal).value)


def enhance_file(
    input_path: str | Path,
    output_dir: str | Path,
    net: ReflectanceNet,
    save_intermediates: bool = False,
    rng: np.random.Generator | None = None,
) -> Path:
    """Enhance one image file into `output_dir`; returns the output path.

    With `save_intermediates`, the value plane, a disturbed variant of it,
    the reflectance and the inverse illumination are written alongside as
    grayscale PNGs.
    """
    input_path = Path(input_path)
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)

    img = load_image(input_path)
    result = enhance(img, net)
    out_path = output_dir / f"{input_path.stem}.png"
    save_image(result.enhanced, out_path)

    if save_intermediates:
        hsv = rgb_to_hsv(img)
        stem = input_path.stem
        save_plane(hsv.value, output_dir / f"{stem}_value.png")
        rng = rng if rng is not None else np.random.default_rng(0)
        gamma = sample_gamma(float(hsv.value.mean()), rng).gamma
        save_plane(
            disturb(hsv.value, gamma), output_dir / f"{stem}_value_disturbed.png"
        )
        save_plane(result.reflectance, output_dir / f"{stem}_reflectance.png")
        save_plane(
            result.inverse_illumination,
            output_dir / f"{stem}_inverse_illumination.png",
        )
    return out_path
