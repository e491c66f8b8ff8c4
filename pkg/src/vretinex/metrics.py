"""Full-reference image quality metrics and batch evaluation.

PSNR is computed on 8-bit quantized values (peak 255) so the numbers
match common tooling; identical images report an infinite PSNR, shown as
the sentinel string "inf" and excluded from dataset means with a
warning. SSIM is the standard single-scale index with an 11x11 Gaussian
window (sigma 1.5), K1=0.01, K2=0.03 and dynamic range 255. The metric
is defined on single planes; color images are scored per channel and
averaged over R, G, B by default, which shifts absolute values relative
to luma-only scoring, so every report header states the mode used.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import convolve2d

from .color import to_bytes

log = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DYNAMIC_RANGE = 255.0
DEFAULT_EVAL_SIZE = (640, 480)  # (width, height)

# BT.601 luma weights for the optional luma-only SSIM mode.
_LUMA = np.array([0.299, 0.587, 0.114])


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB over all pixels and channels."""
    a, b = _check_pair(a, b)
    qa = to_bytes(a).astype(np.float64)
    qb = to_bytes(b).astype(np.float64)
    mse = np.mean((qa - qb) ** 2)
    if mse == 0.0:
        return math.inf
    return float(10.0 * math.log10(DYNAMIC_RANGE**2 / mse))


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def _ssim_plane(x: np.ndarray, y: np.ndarray) -> float:
    """SSIM between two planes of 8-bit-scale values, mean over valid
    (fully interior) windows."""
    win = _gaussian_window()
    c1 = (SSIM_K1 * DYNAMIC_RANGE) ** 2
    c2 = (SSIM_K2 * DYNAMIC_RANGE) ** 2

    mu_x = convolve2d(x, win, mode="valid")
    mu_y = convolve2d(y, win, mode="valid")
    sxx = convolve2d(x * x, win, mode="valid") - mu_x**2
    syy = convolve2d(y * y, win, mode="valid") - mu_y**2
    sxy = convolve2d(x * y, win, mode="valid") - mu_x * mu_y

    num = (2.0 * mu_x * mu_y + c1) * (2.0 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim(a: np.ndarray, b: np.ndarray, mode: str = "rgb_mean") -> float:
    """Structural similarity of two RGB images.

    mode "rgb_mean" scores each channel and averages; "luma" scores the
    BT.601 luma plane only. Images must be at least 11x11.
    """
    a, b = _check_pair(a, b)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) images, got shape {a.shape}")
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise ValueError(
            f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM"
        )
    qa = to_bytes(a).astype(np.float64)
    qb = to_bytes(b).astype(np.float64)
    if mode == "rgb_mean":
        return float(np.mean([_ssim_plane(qa[..., c], qb[..., c]) for c in range(3)]))
    if mode == "luma":
        return _ssim_plane(qa @ _LUMA, qb @ _LUMA)
    raise ValueError(f"unknown SSIM mode {mode!r}")


@dataclass
class PairMetrics:
    name: str
    psnr: float
    ssim: float


@dataclass
class MetricReport:
    pairs: list[PairMetrics] = field(default_factory=list)
    unmatched: list[str] = field(default_factory=list)
    ssim_mode: str = "rgb_mean"
    eval_size: tuple[int, int] | None = None

    @property
    def image_count(self) -> int:
        return len(self.pairs)

    @property
    def excluded_infinite(self) -> list[str]:
        return [p.name for p in self.pairs if math.isinf(p.psnr)]

    @property
    def mean_psnr(self) -> float | None:
        finite = [p.psnr for p in self.pairs if math.isfinite(p.psnr)]
        return float(np.mean(finite)) if finite else None

    @property
    def mean_ssim(self) -> float | None:
        return float(np.mean([p.ssim for p in self.pairs])) if self.pairs else None

    def _psnr_repr(self, value: float) -> str | float:
        return "inf" if math.isinf(value) else round(value, 6)

    def to_text(self) -> str:
        size = f"{self.eval_size[0]}x{self.eval_size[1]}" if self.eval_size else "native"
        lines = [
            f"# evaluation at {size}; SSIM mode: {self.ssim_mode} "
            "(per-channel SSIM averaged over R,G,B unless mode is luma)",
            f"{'image':<40} {'psnr_db':>10} {'ssim':>8}",
        ]
        for p in self.pairs:
            p_str = "inf" if math.isinf(p.psnr) else f"{p.psnr:.3f}"
            lines.append(f"{p.name:<40} {p_str:>10} {p.ssim:>8.4f}")
        mp = self.mean_psnr
        lines.append(
            f"{'MEAN (' + str(self.image_count) + ' images)':<40} "
            f"{mp if mp is None else format(mp, '.3f'):>10} "
            f"{self.mean_ssim if self.mean_ssim is None else format(self.mean_ssim, '.4f'):>8}"
        )
        if self.excluded_infinite:
            lines.append(f"# excluded from PSNR mean (identical): {self.excluded_infinite}")
        if self.unmatched:
            lines.append(f"# unmatched files (excluded): {self.unmatched}")
        return "\n".join(lines)

    def to_lines(self) -> list[str]:
        """Machine-readable line records; one JSON object per line."""
        header = {
            "kind": "header",
            "ssim_mode": self.ssim_mode,
            "ssim_channel_handling": "per-channel SSIM averaged over R,G,B"
            if self.ssim_mode == "rgb_mean"
            else "BT.601 luma plane only",
            "eval_size": list(self.eval_size) if self.eval_size else None,
            "image_count": self.image_count,
        }
        lines = [json.dumps(header)]
        for p in self.pairs:
            lines.append(
                json.dumps(
                    {
                        "kind": "pair",
                        "name": p.name,
                        "psnr": self._psnr_repr(p.psnr),
                        "ssim": round(p.ssim, 6),
                    }
                )
            )
        summary = {
            "kind": "summary",
            "mean_psnr": self.mean_psnr,
            "mean_ssim": self.mean_ssim,
            "excluded_infinite": self.excluded_infinite,
            "unmatched": self.unmatched,
        }
        lines.append(json.dumps(summary))
        return lines

    def write_jsonl(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.to_lines()) + "\n", encoding="utf-8")


def _load_resized(path: Path, size: tuple[int, int] | None) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        rgb = im.convert("RGB")
        if size is not None:
            rgb = rgb.resize(size, Image.BILINEAR)
        return np.asarray(rgb, dtype=np.float64) / 255.0


def evaluate(
    enhanced_dir: str | Path,
    reference_dir: str | Path,
    size: tuple[int, int] | None = DEFAULT_EVAL_SIZE,
    ssim_mode: str = "rgb_mean",
) -> MetricReport:
    """Score every filename present in both directories.

    Both images of a pair are resized to `size` (width, height) before
    scoring; pass None to score at native resolution. Files present in
    only one directory are listed as unmatched and excluded from means.
    """
    enhanced_dir, reference_dir = Path(enhanced_dir), Path(reference_dir)
    from .training import IMAGE_EXTENSIONS

    def names(d: Path) -> dict[str, Path]:
        return {
            p.name: p
            for p in d.iterdir()
            if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
        }

    enh, ref = names(enhanced_dir), names(reference_dir)
    report = MetricReport(ssim_mode=ssim_mode, eval_size=size)
    report.unmatched = sorted(set(enh) ^ set(ref))

    for name in sorted(set(enh) & set(ref)):
        a = _load_resized(enh[name], size)
        b = _load_resized(ref[name], size)
        report.pairs.append(
            PairMetrics(name=name, psnr=psnr(a, b), ssim=ssim(a, b, mode=ssim_mode))
        )
    for name in report.excluded_infinite:
        log.warning("%s: identical images, infinite PSNR excluded from mean", name)
    return report
