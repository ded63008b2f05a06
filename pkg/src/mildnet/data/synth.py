"""
Synthetic H&E-like gland images with exact instance and lumen labels.

Each gland is an elliptical (benign) or fused, irregular (malignant-like)
region: pale epithelial cytoplasm, a band of dark nuclei along the outer
edge, and a bright lumen core. Glands sit on a textured pink stroma with
scattered stromal nuclei and are kept at least a few pixels apart, so every
instance is a single 4-connected component.

Glands are made fat enough (minimum radius of curvature above 5 px) that
the disk-5 opening used in post-processing does not erase them.

``ambiguous=k`` adds k unlabeled decoys per image: gland-like blobs rendered
at partial contrast, which a trained model should be unsure about.
"""

from __future__ import annotations

from typing import List

import numpy as np
from scipy import ndimage

from ..errors import ConfigError
from .types import Sample

BENIGN = "benign"
MALIGNANT = "malignant"
GRADES = (BENIGN, MALIGNANT)

STROMA = np.array([226.0, 170.0, 200.0])
STROMA_NUCLEUS = np.array([120.0, 70.0, 150.0])
CYTOPLASM = np.array([196.0, 128.0, 196.0])
NUCLEUS = np.array([62.0, 32.0, 112.0])
LUMEN = np.array([246.0, 238.0, 246.0])

MIN_AREA = 50
GAP = 5  # minimum background margin between glands, px
DECOY_CONTRAST = 0.5


def _ellipse(shape, cy, cx, a, b, theta) -> np.ndarray:
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _axes(rng, size: int):
    a = rng.uniform(9.0, 9.0 + size / 24.0)
    b = rng.uniform(max(7.5, np.sqrt(5.8 * a)), a + 1e-9)
    return a, b


def _benign_shape(rng, size):
    a, b = _axes(rng, size)
    cy, cx = rng.uniform(a + 1, size - a - 1, size=2)
    theta = rng.uniform(0, np.pi)
    mask = _ellipse((size, size), cy, cx, a, b, theta)
    s = rng.uniform(0.35, 0.55)
    lumen = _ellipse((size, size), cy, cx, a * s, b * s, theta) & mask
    return mask, lumen


def _malignant_shape(rng, size):
    a, b = _axes(rng, size)
    cy, cx = rng.uniform(a + 6, size - a - 6, size=2)
    mask = np.zeros((size, size), bool)
    for _ in range(rng.integers(2, 4)):
        oy, ox = rng.uniform(-0.6, 0.6, size=2) * a
        aa, bb = a * rng.uniform(0.7, 1.0), b * rng.uniform(0.8, 1.0)
        bb = max(bb, np.sqrt(5.8 * aa))
        mask |= _ellipse((size, size), cy + oy, cx + ox, aa, bb, rng.uniform(0, np.pi))
    # fuse, then knock off thin protrusions so the shape survives opening
    mask = ndimage.binary_opening(mask, structure=_disk(4))
    lab, n = ndimage.label(mask)
    if n == 0:
        return mask, mask
    keep = 1 + int(np.argmax(ndimage.sum(mask, lab, range(1, n + 1))))
    mask = lab == keep
    dist = ndimage.distance_transform_edt(mask)
    lumen = dist > rng.uniform(0.45, 0.6) * dist.max()
    return mask, lumen


def _disk(r):
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return yy * yy + xx * xx <= r * r


def _smooth_noise(rng, shape, sigma):
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma)
    return f / (f.std() + 1e-12)


def _dots(rng, where: np.ndarray, density: float, sigma: float = 0.7) -> np.ndarray:
    """Soft nucleus-like dots placed at random pixels of ``where``."""
    pts = (rng.random(where.shape) < density) & where
    d = ndimage.gaussian_filter(pts.astype(np.float64), sigma)
    return np.clip(d * 2 * np.pi * sigma**2 * 0.9, 0, 1)


def _paint(img: np.ndarray, alpha: np.ndarray, colour: np.ndarray) -> None:
    img *= 1 - alpha[..., None]
    img += alpha[..., None] * colour


def _render_gland(rng, img: np.ndarray, mask: np.ndarray, lumen: np.ndarray, contrast: float = 1.0) -> None:
    dist = ndimage.distance_transform_edt(mask)
    soft = np.clip(ndimage.gaussian_filter(mask.astype(np.float64), 0.6) * 1.2, 0, 1)
    _paint(img, contrast * soft, CYTOPLASM)
    band = mask & (dist <= rng.uniform(2.5, 3.5)) & ~lumen
    _paint(img, contrast * _dots(rng, band, 0.35), NUCLEUS)
    lum = np.clip(ndimage.gaussian_filter(lumen.astype(np.float64), 0.7) * 1.3, 0, 1)
    _paint(img, contrast * lum, LUMEN)


def _place(rng, size, maker, occupied, tries=60):
    guard = _disk(GAP)
    for _ in range(tries):
        mask, lumen = maker(rng, size)
        if mask.sum() < MIN_AREA or (ndimage.binary_dilation(mask, guard) & occupied).any():
            continue
        return mask, lumen
    return None


def synth_image(size: int, grade: str = BENIGN, seed=0, ambiguous: int = 0, name: str = "") -> Sample:
    rng = np.random.default_rng(seed)
    img = STROMA + _smooth_noise(rng, (size, size), 2.0)[..., None] * np.array([10.0, 14.0, 9.0])
    _paint(img, _dots(rng, np.ones((size, size), bool), 0.006, 0.9), STROMA_NUCLEUS)

    maker = _benign_shape if grade == BENIGN else _malignant_shape
    labels = np.zeros((size, size), np.int32)
    lumen_labels = np.zeros((size, size), np.int32)
    occupied = np.zeros((size, size), bool)
    # decoys are placed first so that they are not crowded out
    for _ in range(ambiguous):
        placed = _place(rng, size, _benign_shape, occupied)
        if placed is None:
            continue
        mask, lumen = placed
        occupied |= mask
        _render_gland(rng, img, mask, lumen, contrast=DECOY_CONTRAST)
    target = max(1, int(round(size * size / 1100)))
    k = 0
    for _ in range(target):
        placed = _place(rng, size, maker, occupied)
        if placed is None:
            continue
        mask, lumen = placed
        k += 1
        labels[mask] = k
        lumen_labels[lumen] = k
        occupied |= mask
        _render_gland(rng, img, mask, lumen)

    img += rng.normal(0.0, 4.0, img.shape)
    img = ndimage.gaussian_filter(img, (0.5, 0.5, 0))
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return Sample(name=name, image=image, labels=labels, lumen=lumen_labels)


def synth_glands(
    count: int,
    size: int,
    grade: str = BENIGN,
    seed: int = 0,
    ambiguous: int = 0,
    start: int = 0,
) -> List[Sample]:
    """Generate ``count`` images of extent ``size`` x ``size``.

    Image ``i`` depends only on ``(seed, start + i)``, so a longer run extends a
    shorter one with the same seed.
    """
    if size < 64:
        raise ConfigError(f"synthetic images need size >= 64, got {size}")
    if grade not in GRADES:
        raise ConfigError(f"grade must be one of {GRADES}, got {grade!r}")
    if count < 0 or ambiguous < 0:
        raise ConfigError("count and ambiguous must be non-negative")
    return [
        synth_image(size, grade, seed=[seed, start + i], ambiguous=ambiguous, name=f"{start + i:03d}")
        for i in range(count)
    ]

