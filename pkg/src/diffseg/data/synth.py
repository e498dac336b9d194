"""Synthetic H&E-like tiles with exact masks.

Class 0 is textured stroma/background, class 1 small dark elliptical nuclei,
class 2 gland-like annuli around a pale lumen (the lumen stays class 0).
Structures are added greedily until each class share is as close as
possible to its target, so class shares are imbalanced by construction.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from ..errors import ConfigError

DEFAULT_SHARES = (0.80, 0.12, 0.08)

_STROMA = np.array([0.91, 0.66, 0.79])
_LUMEN = np.array([0.97, 0.93, 0.95])
_GLAND = np.array([0.72, 0.45, 0.68])
_NUCLEUS = np.array([0.33, 0.20, 0.52])


def _ellipse(yy, xx, cy, cx, ry, rx, angle):
    ca, sa = np.cos(angle), np.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = (dx * ca + dy * sa) / rx
    v = (-dx * sa + dy * ca) / ry
    return u * u + v * v


def _fill_towards(target_share, labels, cls, propose, max_tries=400):
    """Add structures while doing so moves the class share closer to ``target_share``."""
    total = labels.size
    count = int((labels == cls).sum())
    for _ in range(max_tries):
        if count >= target_share * total:
            break
        region = propose() & (labels == 0)
        added = int(region.sum())
        if added == 0:
            continue
        if abs(count + added - target_share * total) >= abs(count - target_share * total):
            break
        labels[region] = cls
        count += added
    return labels


def synth_image(side: int, rng: np.random.Generator,
                shares: tuple[float, ...] = DEFAULT_SHARES) -> tuple[np.ndarray, np.ndarray]:
    """One ``side x side`` RGB tile in [0, 1] and its class-index mask."""
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    labels = np.zeros((side, side), dtype=np.int64)
    lumen = np.zeros((side, side), dtype=bool)
    scale = side / 64.0

    def gland():
        cy, cx = rng.uniform(0, side, size=2)
        r_out = rng.uniform(5.0, 9.0) * scale
        aspect = rng.uniform(0.7, 1.0)
        angle = rng.uniform(0, np.pi)
        d = _ellipse(yy, xx, cy, cx, r_out * aspect, r_out, angle)
        inner = rng.uniform(0.45, 0.65)
        ring = (d <= 1.0) & (d > inner * inner)
        lumen[(d <= inner * inner) & (labels == 0)] = True
        return ring

    def nucleus():
        cy, cx = rng.uniform(0, side, size=2)
        r = rng.uniform(1.5, 3.2) * scale
        d = _ellipse(yy, xx, cy, cx, r * rng.uniform(0.6, 1.0), r, rng.uniform(0, np.pi))
        return d <= 1.0

    if len(shares) > 2:
        labels = _fill_towards(shares[2], labels, 2, gland)
    labels = _fill_towards(shares[1], labels, 1, nucleus)
    lumen &= labels == 0

    # per-image stain variation and low-frequency texture
    stain = rng.normal(1.0, 0.04, size=3)
    texture = gaussian_filter(rng.standard_normal((side, side)), sigma=2.0 * scale)
    texture /= texture.std() + 1e-12
    img = np.empty((side, side, 3))
    img[:] = _STROMA * stain
    img += 0.05 * texture[..., None]
    img[lumen] = _LUMEN * stain
    img[labels == 2] = _GLAND * stain + 0.03 * texture[labels == 2][:, None]
    img[labels == 1] = _NUCLEUS * stain + 0.04 * texture[labels == 1][:, None]
    img = gaussian_filter(img, sigma=(0.6, 0.6, 0))
    img += rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0), labels


def synth_generate(n_images: int, side: int = 64, num_classes: int = 3,
                   rng: np.random.Generator | int | None = None,
                   shares: tuple[float, ...] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """``n_images`` tiles: images (n, side, side, 3) in [0, 1] and masks (n, side, side)."""
    if side < 64:
        raise ConfigError(f"side must be >= 64, got {side}")
    if n_images < 1:
        raise ConfigError("need at least one image")
    if num_classes not in (2, 3):
        raise ConfigError("the synthetic generator supports 2 or 3 classes")
    if shares is None:
        shares = DEFAULT_SHARES if num_classes == 3 else (0.88, 0.12)
    if len(shares) != num_classes or abs(sum(shares) - 1.0) > 1e-9:
        raise ConfigError(f"shares must have {num_classes} entries summing to 1")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    images = np.empty((n_images, side, side, 3))
    masks = np.empty((n_images, side, side), dtype=np.int64)
    for i in range(n_images):
        images[i], masks[i] = synth_image(side, rng, tuple(shares))
    return images, masks
