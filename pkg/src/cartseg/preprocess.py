"""Deterministic slice preprocessing and stochastic training-time augmentation.

The deterministic chain is: resample to a fixed pixel size, truncate the
intensity histogram to a percentile window and rescale to [0, 1], then crop
the central region (zero-padding when the input is smaller than the crop).
Augmentation applies left-right flips jointly to image and mask, and gamma,
down/up-scaling, and bilateral filtering to the image only.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class PreprocessConfig:
    target_spacing_mm: tuple[float, float] = (0.37, 0.37)
    pct_low: float = 10.0
    pct_high: float = 99.0
    crop_size: tuple[int, int] = (300, 300)
    # Percentiles are computed per slice; per-volume is available as a switch.
    per_volume_percentiles: bool = False

    def __post_init__(self):
        if not 0 <= self.pct_low < self.pct_high <= 100:
            raise ConfigError(f"bad percentile window ({self.pct_low}, {self.pct_high})")
        if min(self.crop_size) < 1:
            raise ConfigError(f"crop_size must be positive: {self.crop_size}")
        if min(self.target_spacing_mm) <= 0:
            raise ConfigError(f"target spacing must be positive: {self.target_spacing_mm}")


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    gamma_prob: float = 0.5
    gamma_range: tuple[float, float] = (0.8, 1.25)
    downup_prob: float = 0.5
    downup_scale_range: tuple[float, float] = (0.5, 0.9)
    bilateral_prob: float = 0.5
    bilateral_params: tuple[float, float] = (1.5, 0.1)  # (spatial sigma px, range sigma)

    def __post_init__(self):
        for p in (self.flip_prob, self.gamma_prob, self.downup_prob, self.bilateral_prob):
            if not 0 <= p <= 1:
                raise ConfigError(f"probability out of [0,1]: {p}")
        if min(self.gamma_range) <= 0:
            raise ConfigError(f"gamma_range must be positive: {self.gamma_range}")
        if not self.downup_scale_range[0] < 1:
            raise ConfigError("downup_scale_range low bound must be < 1")

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(flip_prob=0.0, gamma_prob=0.0, downup_prob=0.0, bilateral_prob=0.0)


def resample_slice(
    image: np.ndarray,
    from_spacing: tuple[float, float],
    to_spacing: tuple[float, float],
    is_mask: bool = False,
) -> np.ndarray:
    """Resample one slice; bilinear for images, nearest-neighbour for masks.

    Output dims = round(input_dim * from / to) per axis.
    """
    if min(from_spacing) <= 0 or min(to_spacing) <= 0:
        raise ConfigError("spacings must be positive")
    rows, cols = image.shape
    out_rows = int(round(rows * from_spacing[0] / to_spacing[0]))
    out_cols = int(round(cols * from_spacing[1] / to_spacing[1]))
    if (out_rows, out_cols) == (rows, cols):
        return image.copy()
    interp = cv2.INTER_NEAREST if is_mask else cv2.INTER_LINEAR
    src = image if is_mask else np.ascontiguousarray(image, dtype=np.float32)
    return cv2.resize(src, (out_cols, out_rows), interpolation=interp)


def truncate_intensities(
    image: np.ndarray, pct_low: float = 10.0, pct_high: float = 99.0, bounds=None
) -> tuple[np.ndarray, bool]:
    """Clip to the [pct_low, pct_high] empirical percentiles and rescale to [0, 1].

    Returns (rescaled image, degenerate flag). A constant image (coinciding
    percentiles) maps to all zeros with the flag set. `bounds` overrides the
    percentile estimates, used for per-volume normalization.
    """
    if not 0 <= pct_low < pct_high <= 100:
        raise ConfigError(f"bad percentile window ({pct_low}, {pct_high})")
    if bounds is None:
        lo, hi = np.percentile(image, [pct_low, pct_high])
    else:
        lo, hi = bounds
    if hi <= lo:
        return np.zeros_like(image, dtype=np.float32), True
    out = (np.clip(image, lo, hi) - lo) / (hi - lo)
    return out.astype(np.float32), False


def center_crop(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Crop the central `size` region; zero-pad symmetrically when smaller."""
    out = image
    for axis, target in enumerate(size):
        n = out.shape[axis]
        if n > target:
            start = (n - target) // 2
            out = np.take(out, np.arange(start, start + target), axis=axis)
        elif n < target:
            before = (target - n) // 2
            pad = [(0, 0), (0, 0)]
            pad[axis] = (before, target - n - before)
            out = np.pad(out, pad, mode="constant")
    return np.ascontiguousarray(out)


def preprocess_slice(
    image: np.ndarray,
    from_spacing: tuple[float, float],
    cfg: PreprocessConfig,
    mask: np.ndarray | None = None,
    bounds=None,
):
    """Full deterministic chain on one slice (and its mask, when given)."""
    img = resample_slice(image, from_spacing, cfg.target_spacing_mm)
    img, _ = truncate_intensities(img, cfg.pct_low, cfg.pct_high, bounds=bounds)
    img = center_crop(img, cfg.crop_size)
    if mask is None:
        return img
    m = resample_slice(mask, from_spacing, cfg.target_spacing_mm, is_mask=True)
    m = center_crop(m, cfg.crop_size)
    return img, m


def augment(
    image: np.ndarray,
    mask: np.ndarray | None,
    cfg: AugmentConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Stochastic training augmentations; deterministic given the rng state.

    Draws are consumed in a fixed order regardless of the probabilities, so
    one stream stays aligned across configurations.
    """
    if mask is not None and image.shape != mask.shape:
        raise ShapeError(f"image {image.shape} vs mask {mask.shape}")
    img = image

    if rng.random() < cfg.flip_prob:
        img = img[:, ::-1].copy()
        if mask is not None:
            mask = mask[:, ::-1].copy()

    g = rng.uniform(*cfg.gamma_range)
    if rng.random() < cfg.gamma_prob:
        img = np.power(np.clip(img, 0.0, None), g).astype(np.float32)

    scale = rng.uniform(*cfg.downup_scale_range)
    if rng.random() < cfg.downup_prob:
        rows, cols = img.shape
        small = (max(1, int(round(cols * scale))), max(1, int(round(rows * scale))))
        down = cv2.resize(img.astype(np.float32), small, interpolation=cv2.INTER_LINEAR)
        img = cv2.resize(down, (cols, rows), interpolation=cv2.INTER_LINEAR)

    if rng.random() < cfg.bilateral_prob:
        spatial, range_sigma = cfg.bilateral_params
        d = max(1, int(round(spatial * 4)) | 1)
        img = cv2.bilateralFilter(np.ascontiguousarray(img, dtype=np.float32), d, range_sigma, spatial)

    return np.ascontiguousarray(img, dtype=np.float32), mask
