"""Positive-pair augmentation with exactly recorded crop geometry."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Optional, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .geometry import overlap_region
from .types import CropBox

OUTPUT_SIDE = 224
SOLARIZE_THRESHOLD = 0.5


@dataclass(frozen=True)
class AugmentParams:
    crop_area_range: Tuple[float, float] = (0.08, 1.0)
    aspect_ratio_range: Tuple[float, float] = (3 / 4, 4 / 3)
    hflip_prob: float = 0.5
    jitter_prob: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    hue: float = 0.1
    grayscale_prob: float = 0.2
    blur_prob_t1: float = 1.0
    blur_prob_t2: float = 0.1
    blur_sigma_range: Tuple[float, float] = (0.1, 2.0)
    solarize_prob_t1: float = 0.0
    solarize_prob_t2: float = 0.2
    min_overlap_frac: float = 0.01
    max_retries: int = 10
    output_side: int = OUTPUT_SIDE

    def __post_init__(self):
        for f in fields(self):
            if f.name.endswith("_prob") or "_prob_" in f.name:
                v = getattr(self, f.name)
                if not 0.0 <= v <= 1.0:
                    raise ValueError(f"{f.name} must be in [0, 1], got {v}")
        for name in ("crop_area_range", "aspect_ratio_range", "blur_sigma_range"):
            lo, hi = getattr(self, name)
            if lo > hi or lo <= 0:
                raise ValueError(f"{name} must be an ordered positive pair")
        if self.crop_area_range[1] > 1.0:
            raise ValueError("crop area fraction cannot exceed 1")
        if not 0.0 <= self.min_overlap_frac <= 1.0:
            raise ValueError("min_overlap_frac must be in [0, 1]")
        if self.max_retries < 0:
            raise ValueError("max_retries must be non-negative")

    @classmethod
    def identity(cls, **kw) -> "AugmentParams":
        """Full-image crops and no photometric change."""
        base = dict(crop_area_range=(1.0, 1.0), aspect_ratio_range=(1.0, 1.0),
                    hflip_prob=0.0, jitter_prob=0.0, grayscale_prob=0.0,
                    blur_prob_t1=0.0, blur_prob_t2=0.0,
                    solarize_prob_t1=0.0, solarize_prob_t2=0.0)
        base.update(kw)
        return cls(**base)

    @classmethod
    def geometric(cls, **kw) -> "AugmentParams":
        """Default crops and flips with the photometric ops switched off."""
        base = dict(jitter_prob=0.0, grayscale_prob=0.0, blur_prob_t1=0.0, blur_prob_t2=0.0,
                    solarize_prob_t1=0.0, solarize_prob_t2=0.0)
        base.update(kw)
        return cls(**base)


@dataclass
class ViewPair:
    image1: np.ndarray
    image2: np.ndarray
    crop1: CropBox
    crop2: CropBox
    seed: Optional[int] = None


def random_resized_crop(height: int, width: int, params: AugmentParams,
                        rng: np.random.Generator) -> CropBox:
    """Integer crop box: area fraction uniform, aspect ratio log-uniform.

    Ten attempts, then a centre crop clamped to the allowed aspect range.
    """
    area = height * width
    log_lo, log_hi = (math.log(r) for r in params.aspect_ratio_range)
    for _ in range(10):
        target = area * rng.uniform(*params.crop_area_range)
        ratio = math.exp(rng.uniform(log_lo, log_hi))
        w = int(round(math.sqrt(target * ratio)))
        h = int(round(math.sqrt(target / ratio)))
        if 0 < w <= width and 0 < h <= height:
            x = int(rng.integers(0, width - w + 1))
            y = int(rng.integers(0, height - h + 1))
            return CropBox(x, y, w, h)
    in_ratio = width / height
    lo, hi = params.aspect_ratio_range
    if in_ratio < lo:
        w, h = width, int(round(width / lo))
    elif in_ratio > hi:
        h, w = height, int(round(height * hi))
    else:
        w, h = width, height
    return CropBox((width - w) // 2, (height - h) // 2, w, h)


def sample_crop(height: int, width: int, params: AugmentParams,
                rng: np.random.Generator) -> CropBox:
    box = random_resized_crop(height, width, params, rng)
    flip = bool(rng.random() < params.hflip_prob)
    return CropBox(box.x, box.y, box.w, box.h, flip)


def resample(image: np.ndarray, crop: CropBox, side: int = OUTPUT_SIDE) -> np.ndarray:
    """Bilinearly resample ``crop`` of an H x W x C image to side x side.

    Output pixel centres map to source pixel centres; samples beyond the
    border are clamped to the edge pixel. A flipped crop mirrors columns.
    """
    h, w = image.shape[:2]
    xs = crop.x + (np.arange(side) + 0.5) * (crop.w / side) - 0.5
    ys = crop.y + (np.arange(side) + 0.5) * (crop.h / side) - 0.5
    if crop.hflip:
        xs = xs[::-1]
    xs = np.clip(xs, 0, w - 1)
    ys = np.clip(ys, 0, h - 1)
    x0 = np.minimum(np.floor(xs).astype(np.int64), w - 2) if w > 1 else np.zeros(side, np.int64)
    y0 = np.minimum(np.floor(ys).astype(np.int64), h - 2) if h > 1 else np.zeros(side, np.int64)
    fx = (xs - x0)[None, :, None]
    fy = (ys - y0)[:, None, None]
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    top = image[y0][:, x0] * (1 - fx) + image[y0][:, x1] * fx
    bottom = image[y1][:, x0] * (1 - fx) + image[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


# -- photometric ----------------------------------------------------------------

_LUMA = np.array([0.299, 0.587, 0.114])


def grayscale(image: np.ndarray) -> np.ndarray:
    g = image @ _LUMA
    return np.repeat(g[..., None], 3, axis=-1)


def _rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(-1)
    minc = rgb.min(-1)
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1), 0.0)
    safe = np.where(delta > 0, delta, 1)
    rc, gc, bc = (maxc - r) / safe, (maxc - g) / safe, (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, maxc], -1)


# Channel sources (indices into [v, t, p, q]) for each hue sextant.
_SEXTANT = np.array([[0, 1, 2], [3, 0, 2], [2, 0, 1], [2, 3, 0], [1, 2, 0], [0, 2, 3]])


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    src = np.stack([v, t, p, q], -1)
    idx = _SEXTANT[i.astype(np.int64) % 6]
    return np.take_along_axis(src, idx, axis=-1)


def color_jitter(image: np.ndarray, params: AugmentParams, rng: np.random.Generator) -> np.ndarray:
    """Brightness, contrast, saturation, hue in that order.

    Factors are uniform in [1 - m, 1 + m]; the hue shift is uniform in [-m, m]
    turns.
    """
    out = image * rng.uniform(max(0.0, 1 - params.brightness), 1 + params.brightness)
    out = np.clip(out, 0, 1)
    mean = (out @ _LUMA).mean()
    out = np.clip((out - mean) * rng.uniform(max(0.0, 1 - params.contrast), 1 + params.contrast) + mean, 0, 1)
    gray = grayscale(out)
    out = np.clip(gray + (out - gray) * rng.uniform(max(0.0, 1 - params.saturation), 1 + params.saturation), 0, 1)
    hsv = _rgb_to_hsv(out)
    hsv[..., 0] = (hsv[..., 0] + rng.uniform(-params.hue, params.hue)) % 1.0
    return np.clip(_hsv_to_rgb(hsv), 0, 1)


def solarize(image: np.ndarray, threshold: float = SOLARIZE_THRESHOLD) -> np.ndarray:
    return np.where(image >= threshold, 1.0 - image, image)


def apply_photometric(image: np.ndarray, which: int, params: AugmentParams,
                      rng: np.random.Generator) -> np.ndarray:
    """Jitter, grayscale, blur, solarize with transform ``which`` (1 or 2) probabilities."""
    if which not in (1, 2):
        raise ValueError("which must be 1 or 2")
    blur_p = params.blur_prob_t1 if which == 1 else params.blur_prob_t2
    sol_p = params.solarize_prob_t1 if which == 1 else params.solarize_prob_t2
    out = image
    if rng.random() < params.jitter_prob:
        out = color_jitter(out, params, rng)
    if rng.random() < params.grayscale_prob:
        out = grayscale(out)
    if rng.random() < blur_p:
        sigma = rng.uniform(*params.blur_sigma_range)
        out = gaussian_filter(out, sigma=(sigma, sigma, 0), mode="reflect")
    if rng.random() < sol_p:
        out = solarize(out)
    return np.clip(out, 0.0, 1.0)


def _enough_overlap(c1: CropBox, c2: CropBox, frac: float) -> bool:
    region = overlap_region(c1, c2)
    if region is None:
        return False
    return region.area >= frac * min(c1.area, c2.area)


def sample_geometry(height: int, width: int, params: AugmentParams,
                    rng: np.random.Generator) -> Tuple[CropBox, CropBox]:
    crop1 = sample_crop(height, width, params, rng)
    for _ in range(max(params.max_retries, 1)):
        crop2 = sample_crop(height, width, params, rng)
        if _enough_overlap(crop1, crop2, params.min_overlap_frac):
            return crop1, crop2
    return crop1, crop1


def sample_view_pair(image: np.ndarray, params: AugmentParams = AugmentParams(),
                     rng: Optional[np.random.Generator] = None,
                     seed: Optional[int] = None) -> ViewPair:
    if rng is None:
        rng = np.random.default_rng(seed)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got shape {image.shape}")
    h, w = image.shape[:2]
    if h < 32 or w < 32:
        raise ValueError(f"source image must be at least 32x32, got {h}x{w}")
    image = np.asarray(image, dtype=np.float64)
    crop1, crop2 = sample_geometry(h, w, params, rng)
    v1 = apply_photometric(resample(image, crop1, params.output_side), 1, params, rng)
    v2 = apply_photometric(resample(image, crop2, params.output_side), 2, params, rng)
    return ViewPair(v1, v2, crop1, crop2, seed)
