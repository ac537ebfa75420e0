"""Synthetic two-modality segmentation scenes.

Scenes are rendered once per seed from a geometry stream that is independent of
the modality, so masks from different modalities line up pixel for pixel and
the only gap between domains is appearance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

MAX_CLASSES = 16
MAX_SIDE = 512


@dataclass(frozen=True)
class SceneSpec:
    width: int = 32
    height: int = 32
    num_classes: int = 4
    shapes_per_image: tuple[int, int] = (2, 4)
    rng_seed: int = 0

    def validate(self):
        if self.width < 8 or self.height < 8:
            raise ValueError("image sides must be >= 8")
        if self.width > MAX_SIDE or self.height > MAX_SIDE:
            raise ValueError(f"image sides must be <= {MAX_SIDE}")
        if not 2 <= self.num_classes <= MAX_CLASSES:
            raise ValueError(f"num_classes must lie in [2, {MAX_CLASSES}]")
        lo, hi = self.shapes_per_image
        if lo < 1 or hi < lo:
            raise ValueError("shapes_per_image must be a range (lo, hi) with 1 <= lo <= hi")


@dataclass(frozen=True)
class ModalitySpec:
    """Appearance model applied on top of the per-class base rendering.

    ``intensity_knots`` is a list of ``(x, y)`` pairs defining a piecewise-linear
    map over base intensities in [0, 1]; the default pair list is the identity.
    """

    intensity_knots: tuple[tuple[float, float], ...] = ((0.0, 0.0), (1.0, 1.0))
    noise_std: float = 0.0
    blur_radius: int = 0
    bias_field_amplitude: float = 0.0

    def validate(self):
        xs = [k[0] for k in self.intensity_knots]
        if len(xs) < 2 or any(b <= a for a, b in zip(xs, xs[1:])):
            raise ValueError("intensity knots need >= 2 strictly increasing x values")
        if self.noise_std < 0 or self.blur_radius < 0 or self.bias_field_amplitude < 0:
            raise ValueError("noise_std, blur_radius and bias_field_amplitude must be >= 0")

    def map_intensity(self, values):
        xs = np.array([k[0] for k in self.intensity_knots], dtype=np.float64)
        ys = np.array([k[1] for k in self.intensity_knots], dtype=np.float64)
        return np.interp(values, xs, ys)


@dataclass
class LabeledImage:
    pixels: np.ndarray  # (H, W) float64
    mask: np.ndarray  # (H, W) uint8

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.uint8)
        if self.pixels.shape != self.mask.shape or self.pixels.ndim != 2:
            raise ValueError(f"pixels {self.pixels.shape} and mask {self.mask.shape} must be equal 2D shapes")


@dataclass(frozen=True)
class AugmentConfig:
    """Probabilities and ranges for the training-time augmentations (off unless enabled)."""

    p_rotate: float = 0.5
    max_angle_deg: float = 20.0
    p_negate: float = 0.5
    p_noise: float = 0.5
    noise_std: float = 0.1
    p_crop: float = 0.5
    min_crop_area: float = 0.75


def base_intensities(num_classes):
    """Evenly spaced class intensities in [0, 1]; background is 0."""
    return np.arange(num_classes, dtype=np.float64) / (num_classes - 1)


def _shape_kind(label):
    # class 1 disk, class 2 annulus hugging a class-1 disk, class 3 rectangle, repeat
    return ("disk", "annulus", "rect")[(label - 1) % 3]


def _draw_mask(spec: SceneSpec, rng: np.random.Generator, first_label: int):
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    mask = np.zeros((h, w), dtype=np.uint8)
    occupied = np.zeros((h, w), dtype=bool)
    n = int(rng.integers(spec.shapes_per_image[0], spec.shapes_per_image[1] + 1))
    side = min(h, w)
    labels = [(first_label + j) % (spec.num_classes - 1) + 1 for j in range(n)]
    for label in labels:
        kind = _shape_kind(label)
        for _attempt in range(20):
            if kind == "rect":
                rh = int(rng.integers(max(2, side // 8), max(3, side // 3) + 1))
                rw = int(rng.integers(max(2, side // 8), max(3, side // 3) + 1))
                y0 = int(rng.integers(1, h - rh))
                x0 = int(rng.integers(1, w - rw))
                region = (yy >= y0) & (yy < y0 + rh) & (xx >= x0) & (xx < x0 + rw)
                footprint = region
            else:
                r = float(rng.uniform(side / 12, side / 6))
                outer = r + max(1.5, r * 0.6) if kind == "annulus" else r
                cy = float(rng.uniform(outer + 1, h - outer - 1))
                cx = float(rng.uniform(outer + 1, w - outer - 1))
                d2 = (yy - cy) ** 2 + (xx - cx) ** 2
                region = d2 <= r * r
                footprint = d2 <= outer * outer
            if not (footprint & occupied).any():
                break
        if kind == "annulus":
            inner_label = label - 1 if label > 1 else 1
            mask[footprint] = label
            mask[region] = inner_label
        else:
            mask[region] = label
        occupied |= footprint
    return mask


def _bias_field(h, w, rng):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    gy, gx = rng.normal(size=2)
    phase = rng.uniform(0, 2 * np.pi)
    field_ = gy * (yy / h - 0.5) + gx * (xx / w - 0.5)
    field_ += 0.5 * np.sin(2 * np.pi * (xx / w + yy / h) + phase)
    return field_ / (np.abs(field_).max() + 1e-12)


def render(mask, num_classes, modality: ModalitySpec, rng: np.random.Generator):
    """Render one mask under ``modality``; identity appearance returns base intensities."""
    pixels = modality.map_intensity(base_intensities(num_classes))[mask]
    if modality.bias_field_amplitude > 0:
        pixels = pixels + modality.bias_field_amplitude * _bias_field(*mask.shape, rng)
    if modality.blur_radius > 0:
        pixels = ndimage.uniform_filter(pixels, size=2 * modality.blur_radius + 1, mode="nearest")
    if modality.noise_std > 0:
        pixels = pixels + rng.normal(0.0, modality.noise_std, size=mask.shape)
    return pixels


def generate_dataset(spec: SceneSpec, modality: ModalitySpec, count: int) -> list[LabeledImage]:
    spec.validate()
    modality.validate()
    if count < 1:
        raise ValueError("count must be >= 1")
    geo_rng = np.random.default_rng([spec.rng_seed, 0])
    app_rng = np.random.default_rng([spec.rng_seed, 1])
    images = []
    next_label = 0
    for _ in range(count):
        mask = _draw_mask(spec, geo_rng, next_label)
        next_label += spec.shapes_per_image[1]
        images.append(LabeledImage(render(mask, spec.num_classes, modality, app_rng), mask))
    return images


def preprocess(images):
    """Per-image z-score followed by clipping to [-3, 3]."""
    if len(images) == 0:
        raise ValueError("preprocess needs at least one image")
    out = []
    for img in images:
        std = img.pixels.std()
        if not std > 0:
            raise ValueError("zero variance image cannot be normalized")
        z = (img.pixels - img.pixels.mean()) / std
        out.append(LabeledImage(np.clip(z, -3.0, 3.0), img.mask.copy()))
    return out


def _warp(arr, coords, order):
    return ndimage.map_coordinates(arr, coords, order=order, mode="nearest")


def apply_augmentation(image: LabeledImage, angle_deg=0.0, negate=False, noise=None, crop=None):
    """Apply explicit augmentation parameters.

    ``crop`` is ``(y0, x0, ch, cw)``; the crop is resampled back to full size.
    ``noise`` is an additive array matching the image, or None.
    """
    h, w = image.pixels.shape
    pixels, mask = image.pixels, image.mask
    if angle_deg != 0.0 or crop is not None:
        y0, x0, ch, cw = crop if crop is not None else (0, 0, h, w)
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        # output grid -> crop window
        sy = y0 + (yy + 0.5) * ch / h - 0.5
        sx = x0 + (xx + 0.5) * cw / w - 0.5
        # rotate about the image centre
        cy, cx = (h - 1) / 2, (w - 1) / 2
        t = math.radians(angle_deg)
        ry = cy + math.cos(t) * (sy - cy) - math.sin(t) * (sx - cx)
        rx = cx + math.sin(t) * (sy - cy) + math.cos(t) * (sx - cx)
        coords = np.stack([ry, rx])
        pixels = _warp(pixels, coords, order=1)
        mask = _warp(mask, coords, order=0).astype(np.uint8)
    if negate:
        pixels = -pixels
    if noise is not None:
        pixels = pixels + noise
    return LabeledImage(np.array(pixels, dtype=np.float64), np.array(mask, dtype=np.uint8))


def augment(image: LabeledImage, rng: np.random.Generator, config: AugmentConfig = AugmentConfig()):
    h, w = image.pixels.shape
    p_rotate = min(max(config.p_rotate, 0.0), 1.0)
    max_angle = min(abs(config.max_angle_deg), 180.0)
    min_area = min(max(config.min_crop_area, 0.05), 1.0)
    angle = float(rng.uniform(-max_angle, max_angle)) if rng.random() < p_rotate else 0.0
    negate = bool(rng.random() < config.p_negate)
    noise = None
    if rng.random() < config.p_noise:
        noise = rng.normal(0.0, max(config.noise_std, 0.0), size=(h, w))
    crop = None
    if rng.random() < config.p_crop:
        area = rng.uniform(min_area, 1.0)
        ch = max(1, min(h, int(round(h * math.sqrt(area)))))
        cw = max(1, min(w, int(round(w * math.sqrt(area)))))
        crop = (int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1)), ch, cw)
    return apply_augmentation(image, angle, negate, noise, crop)


def source_modality():
    return ModalitySpec(noise_std=0.03)


def target_modality():
    # classes 1 and 2 squeezed toward background: order kept, margins shrunk
    return ModalitySpec(intensity_knots=((0.0, 0.0), (1 / 3, 0.1), (2 / 3, 0.2), (1.0, 1.0)), noise_std=0.02)


def with_seed(spec: SceneSpec, seed: int) -> SceneSpec:
    return replace(spec, rng_seed=seed)
