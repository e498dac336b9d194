"""Patch extraction, one-hot masks and augmentation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from ..errors import DataError

log = logging.getLogger(__name__)


@dataclass
class LabeledPatch:
    """``image`` is C x H x W in [0, 1]; ``mask`` is one-hot K x H x W or None."""

    image: np.ndarray
    mask: np.ndarray | None
    provenance: tuple[str, int, int] = ("", 0, 0)


def one_hot_mask(index_mask, num_classes: int) -> np.ndarray:
    index_mask = np.asarray(index_mask)
    bad = np.argwhere((index_mask < 0) | (index_mask >= num_classes))
    if len(bad):
        r, c = (int(v) for v in bad[0])
        raise DataError(f"class index {int(index_mask[r, c])} at ({r}, {c}) "
                        f"outside [0, {num_classes})")
    return (np.arange(num_classes)[:, None, None] == index_mask[None]).astype(np.float64)


def patch_grid(height: int, width: int, patch_size: int, stride: int) -> list[tuple[int, int]]:
    rows = range(0, height - patch_size + 1, stride)
    cols = range(0, width - patch_size + 1, stride)
    return [(r, c) for r in rows for c in cols]


def extract_patches(image: np.ndarray, mask: np.ndarray | None, patch_size: int, stride: int,
                    source: str = "", num_classes: int | None = None) -> list[LabeledPatch]:
    """Slide a ``patch_size`` window with step ``stride`` over an H x W x C image.

    Returns ``[]`` (with a warning) when the image is smaller than one patch.
    Masks are given as H x W class indices and returned one-hot when
    ``num_classes`` is set, otherwise as index patches.
    """
    if stride < 1:
        raise DataError("stride must be >= 1")
    h, w = image.shape[:2]
    if mask is not None and mask.shape[:2] != (h, w):
        raise DataError(f"{source}: mask shape {mask.shape} does not match image {image.shape}")
    if h < patch_size or w < patch_size:
        log.warning("skipping %s: %dx%d smaller than patch size %d", source or "image", h, w,
                    patch_size)
        return []
    chw = image.transpose(2, 0, 1) if image.ndim == 3 else image[None]
    out = []
    for r, c in patch_grid(h, w, patch_size, stride):
        img = chw[:, r:r + patch_size, c:c + patch_size].copy()
        m = None
        if mask is not None:
            m = mask[r:r + patch_size, c:c + patch_size].copy()
            if num_classes is not None:
                m = one_hot_mask(m, num_classes)
        out.append(LabeledPatch(img, m, (source, r, c)))
    return out


@dataclass
class AugmentParams:
    hflip: bool = False
    vflip: bool = False
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    blur_sigma: float = 0.0


def sample_augment_params(rng: np.random.Generator, jitter: float = 0.2,
                          max_blur: float = 1.0) -> AugmentParams:
    return AugmentParams(
        hflip=bool(rng.random() < 0.5),
        vflip=bool(rng.random() < 0.5),
        brightness=float(rng.uniform(1 - jitter, 1 + jitter)),
        contrast=float(rng.uniform(1 - jitter, 1 + jitter)),
        saturation=float(rng.uniform(1 - jitter, 1 + jitter)),
        blur_sigma=float(rng.uniform(0.0, max_blur)),
    )


def _gray(img: np.ndarray) -> np.ndarray:
    if img.shape[0] == 3:
        return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    return img.mean(axis=0)


def apply_augment(patch: LabeledPatch, p: AugmentParams) -> LabeledPatch:
    img, mask = patch.image, patch.mask
    if p.hflip:
        img = img[:, :, ::-1]
        mask = None if mask is None else mask[..., ::-1]
    if p.vflip:
        img = img[:, ::-1, :]
        mask = None if mask is None else mask[..., ::-1, :]
    img = np.array(img, dtype=np.float64)
    if p.brightness != 1.0:
        img *= p.brightness
    if p.contrast != 1.0:
        mean = _gray(img).mean()
        img = (img - mean) * p.contrast + mean
    if p.saturation != 1.0 and img.shape[0] == 3:
        gray = _gray(img)[None]
        img = gray + (img - gray) * p.saturation
    if p.blur_sigma > 0:
        img = gaussian_filter(img, sigma=(0, p.blur_sigma, p.blur_sigma), mode="reflect")
    img = np.clip(img, 0.0, 1.0)
    mask = None if mask is None else np.ascontiguousarray(mask)
    return replace(patch, image=img, mask=mask)


def augment(patch: LabeledPatch, rng: np.random.Generator) -> LabeledPatch:
    """Random flips (image and mask), colour jitter and Gaussian blur (image only)."""
    return apply_augment(patch, sample_augment_params(rng))
